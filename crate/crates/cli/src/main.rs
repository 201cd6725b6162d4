//! `stdnet` command-line front end. Failures print a single
//! `error: <code>: <message>` line on stderr and exit nonzero.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stdnet::checkpoint;
use stdnet::checks::{run_all, run_check};
use stdnet::data::{export_density, load_annotations, load_clip, load_dataset, write_synthetic, DensityFormat, SynthSpec};
use stdnet::density::SigmaMode;
use stdnet::experiments::{
    run_ablation_with, run_decomposition_report, run_stability_study_with, tail_len, write_ablation,
    write_decomposition, write_stability, ExperimentSpec, RunConfig, TAIL_FRACTION,
};
use stdnet::gradcheck::GradcheckReport;
use stdnet::loss::LossKind;
use stdnet::model::{count_params, forward_traced, predict};
use stdnet::train::{evaluate, save_log, train_with};

#[derive(Parser)]
#[command(name = "stdnet", version, about = "Spatiotemporal dilated crowd counting on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-crowd dataset.
    GenSynth {
        /// SynthSpec JSON; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a ground-truth density map from dot annotations.
    Densitymap {
        #[arg(long)]
        ann: PathBuf,
        /// fixed:<sigma> or adaptive:<beta>,<k>
        #[arg(long)]
        sigma: SigmaMode,
        /// Frame id to render; required when the file holds several frames.
        #[arg(long)]
        frame: Option<i64>,
        /// `.csv` writes text, anything else the binary raster.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Preset name or JSON run config.
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "model.stdn")]
        checkpoint: PathBuf,
    },
    /// Count-level MAE and root-MSE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score only the held-out tail of the clip list.
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Predict a density map for the last clip of a sequence directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        #[arg(long)]
        all: bool,
    },
    /// Export every attention gate for one clip as CSV.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter table and temporal-stage savings.
    CountParams {
        /// Preset name or JSON config.
        #[arg(long)]
        config: String,
    },
    /// Scripted studies.
    Study {
        #[command(subcommand)]
        study: Study,
    },
}

#[derive(Subcommand)]
enum Study {
    /// PRL against pixel-wise l2 over paired seeds.
    Stability {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Leave-one-out component ablation.
    Ablation {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Factorised against full 3D parameter counts.
    Decomp {
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "decomposition")]
        out: PathBuf,
    },
}

struct Failure {
    code: &'static str,
    message: String,
}

impl From<stdnet::Error> for Failure {
    fn from(e: stdnet::Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenSynth { spec, out } => gen_synth(spec.as_deref(), &out),
        Command::Densitymap { ann, sigma, frame, out } => densitymap(&ann, sigma, frame, &out),
        Command::Train {
            data,
            config,
            loss,
            epochs,
            lr,
            seed,
            log,
            checkpoint,
        } => {
            let mut rc = RunConfig::load(&config)?;
            if let Some(l) = loss {
                rc.train.loss = l;
            }
            if let Some(e) = epochs {
                rc.train.epochs = e;
            }
            if let Some(lr) = lr {
                rc.train.base_lr = lr;
            }
            train_cmd(&data, rc, seed, &log, &checkpoint)
        }
        Command::Eval {
            checkpoint,
            data,
            val_fraction,
        } => eval(&checkpoint, &data, val_fraction),
        Command::Predict { checkpoint, clip, out } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            let clip = load_clip(&clip, cfg.image_channels, cfg.depth)?;
            let dm = predict(&clip.frames, &cfg, &params)?;
            export_density(&dm, &out, DensityFormat::from_path(&out))?;
            println!("count {:.6}", dm.count());
            Ok(())
        }
        Command::Gradcheck { op, all: _ } => gradcheck(op.as_deref()),
        Command::AttnDump { checkpoint, clip, out } => attn_dump(&checkpoint, &clip, &out),
        Command::CountParams { config } => {
            let cfg = RunConfig::load(&config)?.model.resolve()?;
            print!("{}", param_table(&cfg)?);
            Ok(())
        }
        Command::Study { study } => match study {
            Study::Stability { spec } => {
                let spec = ExperimentSpec::from_file(&spec)?;
                let report = run_stability_study_with(&spec, |r| {
                    eprintln!(
                        "run {} seed {}: tail variance {}",
                        r.loss,
                        r.seed,
                        r.tail_variance.map_or("n/a".into(), |v| format!("{v:.6e}"))
                    );
                })?;
                let tail = tail_len(spec.train.epochs, TAIL_FRACTION);
                print!("{}", write_stability(&spec.output_dir, &report, tail)?);
                Ok(())
            }
            Study::Ablation { spec } => {
                let spec = ExperimentSpec::from_file(&spec)?;
                let report = run_ablation_with(&spec, |r| {
                    eprintln!("{} seed {}: mae {:.4} mse {:.4}", r.flags.label(), r.seed, r.mae, r.mse);
                })?;
                print!("{}", write_ablation(&spec.output_dir, &report)?);
                Ok(())
            }
            Study::Decomp { config, out } => {
                let cfg = RunConfig::load(&config)?.model.resolve()?;
                print!("{}", write_decomposition(&out, &run_decomposition_report(&cfg)?)?);
                Ok(())
            }
        },
    }
}

fn gen_synth(spec: Option<&Path>, out: &Path) -> CliResult {
    let spec: SynthSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::new("io", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(stdnet::Error::from)?
        }
        None => SynthSpec::default(),
    };
    let m = write_synthetic(out, &spec)?;
    println!("wrote {} sequences to {}", m.sequences.len(), out.display());
    Ok(())
}

fn densitymap(ann: &Path, sigma: SigmaMode, frame: Option<i64>, out: &Path) -> CliResult {
    let frames = load_annotations(ann)?;
    let chosen = match frame {
        Some(id) => frames
            .iter()
            .find(|f| f.frame_id == id)
            .ok_or_else(|| Failure::new("invalid-argument", format!("no frame {id} in {}", ann.display())))?,
        None if frames.len() == 1 => &frames[0],
        None => {
            return Err(Failure::new(
                "invalid-argument",
                format!("{} holds {} frames; pick one with --frame", ann.display(), frames.len()),
            ))
        }
    };
    let dm = sigma.render(chosen)?;
    export_density(&dm, out, DensityFormat::from_path(out))?;
    println!("frame {} points {} sum {:.12}", chosen.frame_id, chosen.count(), dm.count());
    Ok(())
}

fn train_cmd(data: &Path, rc: RunConfig, seed: Option<u64>, log: &Path, ckpt: &Path) -> CliResult {
    let mut model = rc.model.resolve()?;
    if let Some(s) = seed {
        model.seed = s;
    }
    let ds = load_dataset(data)?;
    let out = train_with(&ds, &model, &rc.train, |row| {
        eprintln!(
            "epoch {} lr {:e} loss {:.6} val_mae {}",
            row.epoch,
            row.lr,
            row.loss_total,
            row.val_mae.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    })?;
    save_log(&out.log, log)?;
    checkpoint::save(ckpt, &model, &out.params)?;
    if let Some((epoch, step)) = out.diverged {
        return Err(stdnet::Error::Diverged { epoch, step }.into());
    }
    println!("data_hash {}", out.data_hash);
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, val_fraction: Option<f64>) -> CliResult {
    let (cfg, params) = checkpoint::load(ckpt)?;
    let ds = load_dataset(data)?;
    if ds.depth != cfg.depth {
        return Err(Failure::new(
            "invalid-argument",
            format!("dataset clips have {} frames but the model expects {}", ds.depth, cfg.depth),
        ));
    }
    let start = match val_fraction {
        Some(f) if (0.0..1.0).contains(&f) => ds.split_index(f),
        Some(f) => return Err(Failure::new("invalid-argument", format!("val fraction {f} outside [0, 1)"))),
        None => 0,
    };
    let clips = &ds.clips[start..];
    let (mae, mse) = evaluate(&ds, clips, &cfg, &params)?;
    println!("clips {} mae {mae:.6} mse {mse:.6}", clips.len());
    Ok(())
}

fn print_report(op: &str, r: &GradcheckReport) {
    println!(
        "{op:<20} {} checked {:>4} max_rel_err {:.3e}",
        if r.pass { "PASS" } else { "FAIL" },
        r.checked,
        r.max_rel_err
    );
}

fn gradcheck(op: Option<&str>) -> CliResult {
    let results = match op {
        Some(name) => vec![(name, run_check(name))],
        None => run_all(),
    };
    let mut failed = Vec::new();
    for (name, r) in results {
        let r = r?;
        print_report(name, &r);
        if !r.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new("gradcheck-failed", failed.join(",")))
    }
}

fn attn_dump(ckpt: &Path, clip_dir: &Path, out: &Path) -> CliResult {
    let (cfg, params) = checkpoint::load(ckpt)?;
    if !cfg.attention {
        return Err(Failure::new("invalid-argument", "checkpoint was built without attention gates"));
    }
    let clip = load_clip(clip_dir, cfg.image_channels, cfg.depth)?;
    let trace = forward_traced(&clip.frames, &cfg, &params)?;
    let mut csv = String::from("block_id,channel,weight\n");
    for (k, (spatial, temporal)) in trace.attention_weights().into_iter().enumerate() {
        // Spatial gates come one set per frame as [T, C].
        if let Some(a) = spatial {
            let c = a.shape()[1];
            for (t, row) in a.data().chunks_exact(c).enumerate() {
                for (ch, v) in row.iter().enumerate() {
                    let _ = writeln!(csv, "dstb{k}.dsb.t{t},{ch},{v:e}");
                }
            }
        }
        if let Some(a) = temporal {
            for (ch, v) in a.data().iter().enumerate() {
                let _ = writeln!(csv, "dstb{k}.dtb,{ch},{v:e}");
            }
        }
    }
    fs::write(out, csv).map_err(|e| Failure::new("io", format!("{}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn param_table(cfg: &stdnet::model::ModelConfig) -> CliResult<String> {
    let r = count_params(cfg)?;
    let width = r.layers.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$}  {:<18}  {:>10}", "layer", "shape", "params");
    for l in &r.layers {
        let _ = writeln!(s, "{:<width$}  {:<18}  {:>10}", l.name, format!("{:?}", l.shape), l.count);
    }
    let _ = writeln!(s, "{:<width$}  {:<18}  {:>10}", "total", "", r.total);
    for st in &r.stages {
        let _ = writeln!(
            s,
            "stage {}: full3d {} decomposed {} ratio {:.6} (as built {:.6})",
            st.name, st.full3d, st.decomposed, st.ratio, st.actual_ratio
        );
    }
    Ok(s)
}

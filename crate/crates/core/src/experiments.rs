//! Scripted studies: loss stability, leave-one-out ablation and the
//! factorised-conv parameter report. Each writes CSV tables plus a short
//! plain-text summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_dataset, write_text, ClipDataset, SynthSpec};
use crate::error::{invalid, Error, Result};
use crate::loss::LossKind;
use crate::model::{count_params, ModelConfig, ParamReport, StageRatio};
use crate::train::{train, TrainConfig, TrainOutcome};

/// Parameter total reported for the reference network.
pub const REFERENCE_TOTAL: f64 = 18.14e6;

/// Fraction of epochs, counted from the end, whose validation MAE enters
/// the tail variance.
pub const TAIL_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Path(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<ClipDataset> {
        match self {
            DataSource::Synthetic(s) => gen_synthetic(s),
            DataSource::Path(p) => load_dataset(p),
        }
    }
}

/// A model given either by preset name or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Inline(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name).ok_or_else(|| invalid!("unknown model preset {name:?}")),
            ModelSpec::Inline(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

/// Model plus training settings, as read by `train` and `count-params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// `arg` is a preset name, or a JSON file holding either a `RunConfig`
    /// or a bare model config.
    pub fn load(arg: &str) -> Result<Self> {
        if ModelConfig::preset(arg).is_some() {
            return Ok(Self {
                model: ModelSpec::Preset(arg.to_string()),
                train: TrainConfig::default(),
            });
        }
        let path = Path::new(arg);
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("model").is_some() {
            Ok(serde_json::from_value(value)?)
        } else {
            Ok(Self {
                model: ModelSpec::Inline(serde_json::from_value(value)?),
                train: TrainConfig::default(),
            })
        }
    }
}

/// Component switches for an ablation row; `true` keeps the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub ca: bool,
    pub ds: bool,
    pub dt: bool,
    pub prl: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        ca: true,
        ds: true,
        dt: true,
        prl: true,
    };

    /// The full configuration followed by each single-component removal.
    pub fn leave_one_out() -> Vec<Self> {
        vec![
            Self::FULL,
            Self { ca: false, ..Self::FULL },
            Self { ds: false, ..Self::FULL },
            Self { dt: false, ..Self::FULL },
            Self { prl: false, ..Self::FULL },
        ]
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "Y" } else { "-" };
        format!("CA{} DS{} DT{} PRL{}", mark(self.ca), mark(self.ds), mark(self.dt), mark(self.prl))
    }

    /// Switches components off in copies of the given configs: CA bypasses
    /// every gate, DS/DT force that block's dilation rates to 1, PRL swaps
    /// the loss for pixel-wise ℓ2.
    pub fn apply(&self, model: &ModelConfig, tc: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), tc.clone());
        if !self.ca {
            m.attention = false;
        }
        if !self.ds {
            m.spatial_block.dilation_rates.iter_mut().for_each(|r| *r = 1);
        }
        if !self.dt {
            m.temporal_block.dilation_rates.iter_mut().for_each(|r| *r = 1);
        }
        if !self.prl {
            t.loss = LossKind::PixelwiseL2;
        }
        (m, t)
    }
}

fn default_arms() -> Vec<LossKind> {
    vec![LossKind::Prl, LossKind::PixelwiseL2]
}

fn default_configs() -> Vec<AblationFlags> {
    AblationFlags::leave_one_out()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataSource,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Loss kinds compared by the stability study.
    #[serde(default = "default_arms")]
    pub arms: Vec<LossKind>,
    /// Rows of the ablation table.
    #[serde(default = "default_configs")]
    pub configurations: Vec<AblationFlags>,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `⌈fraction·n⌉`, at least 1 and at most `n`.
pub fn tail_len(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1))
}

/// Population variance of the last `⌈fraction·n⌉` values.
pub fn tail_variance(curve: &[f64], fraction: f64) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let k = tail_len(curve.len(), fraction);
    let tail = &curve[curve.len() - k..];
    let mean = tail.iter().sum::<f64>() / k as f64;
    Some(tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64)
}

/// Median with the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub arm: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub val_mae: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub tail_variance: Option<f64>,
    pub diverged: Option<(usize, usize)>,
    pub data_hash: String,
}

impl RunRecord {
    fn from_outcome(arm: usize, loss: LossKind, seed: u64, out: &TrainOutcome) -> Self {
        let val_mae = out.val_mae_curve();
        Self {
            arm,
            loss,
            seed,
            tail_variance: tail_variance(&val_mae, TAIL_FRACTION),
            val_mse: out.epoch_rows().filter_map(|r| r.val_mse).collect(),
            val_mae,
            diverged: out.diverged,
            data_hash: out.data_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: usize,
    pub loss: LossKind,
    pub runs: usize,
    pub excluded: usize,
    pub median_tail_variance: Option<f64>,
    pub median_final_mae: Option<f64>,
    /// Per epoch `(mean, min, max)` over the runs that did not diverge.
    pub band: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub runs: Vec<RunRecord>,
    pub arms: Vec<ArmSummary>,
    /// Seeds on which the arms drew different shuffles or flips.
    pub unpaired_seeds: Vec<u64>,
}

impl StabilityReport {
    /// `Some(true)` when the first arm's median tail variance is below the
    /// second's.
    pub fn first_arm_steadier(&self) -> Option<bool> {
        match (self.arms.first()?.median_tail_variance, self.arms.get(1)?.median_tail_variance) {
            (Some(a), Some(b)) => Some(a < b),
            _ => None,
        }
    }
}

fn band(curves: &[&[f64]]) -> Vec<(f64, f64, f64)> {
    let n = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..n)
        .map(|e| {
            let vals: Vec<f64> = curves.iter().map(|c| c[e]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, lo, hi)
        })
        .collect()
}

pub fn run_stability_study(spec: &ExperimentSpec) -> Result<StabilityReport> {
    run_stability_study_with(spec, |_| {})
}

/// As [`run_stability_study`], calling `progress` after every finished run.
pub fn run_stability_study_with(spec: &ExperimentSpec, mut progress: impl FnMut(&RunRecord)) -> Result<StabilityReport> {
    if spec.arms.len() != 2 {
        return Err(invalid!("the stability study compares exactly two loss kinds, got {:?}", spec.arms));
    }
    if spec.seeds.len() < 3 {
        return Err(invalid!("variance claims need at least 3 seeds, got {}", spec.seeds.len()));
    }
    let model = spec.model.resolve()?;
    let ds = spec.data.load()?;
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        for (arm, &loss) in spec.arms.iter().enumerate() {
            let m = ModelConfig { seed, ..model.clone() };
            let tc = TrainConfig { loss, ..spec.train.clone() };
            let rec = RunRecord::from_outcome(arm, loss, seed, &train(&ds, &m, &tc)?);
            progress(&rec);
            runs.push(rec);
        }
    }
    let unpaired_seeds = spec
        .seeds
        .iter()
        .copied()
        .filter(|&s| {
            let hashes: Vec<&str> = runs.iter().filter(|r| r.seed == s).map(|r| r.data_hash.as_str()).collect();
            hashes.windows(2).any(|w| w[0] != w[1])
        })
        .collect();
    let arms = spec
        .arms
        .iter()
        .enumerate()
        .map(|(arm, &loss)| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.arm == arm).collect();
            let ok: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.diverged.is_none()).collect();
            let tails: Vec<f64> = ok.iter().filter_map(|r| r.tail_variance).collect();
            let finals: Vec<f64> = ok.iter().filter_map(|r| r.val_mae.last().copied()).collect();
            let curves: Vec<&[f64]> = ok.iter().map(|r| r.val_mae.as_slice()).collect();
            ArmSummary {
                arm,
                loss,
                runs: mine.len(),
                excluded: mine.len() - ok.len(),
                median_tail_variance: median(&tails),
                median_final_mae: median(&finals),
                band: band(&curves),
            }
        })
        .collect();
    Ok(StabilityReport {
        runs,
        arms,
        unpaired_seeds,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn stability_summary(r: &StabilityReport, tail_epochs: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "stability study: validation MAE variance over the last {tail_epochs} epochs");
    for a in &r.arms {
        let _ = writeln!(
            s,
            "arm {} ({}): runs {}, excluded {}, median tail variance {}, median final MAE {}",
            a.arm,
            a.loss,
            a.runs,
            a.excluded,
            fmt_opt(a.median_tail_variance),
            fmt_opt(a.median_final_mae)
        );
    }
    for run in r.runs.iter().filter(|x| x.diverged.is_some()) {
        let (e, st) = run.diverged.expect("filtered");
        let _ = writeln!(s, "note: {} seed {} diverged at epoch {e}, step {st}; excluded from bands", run.loss, run.seed);
    }
    for run in &r.runs {
        let _ = writeln!(s, "data stream {} seed {}: {}", run.loss, run.seed, run.data_hash);
    }
    if r.unpaired_seeds.is_empty() {
        let _ = writeln!(s, "paired data order: yes");
    } else {
        let _ = writeln!(s, "paired data order: NO for seeds {:?}", r.unpaired_seeds);
    }
    let verdict = match r.first_arm_steadier() {
        Some(true) => "yes",
        Some(false) => "no",
        None => "undetermined",
    };
    let _ = writeln!(s, "first arm steadier than second: {verdict}");
    s
}

pub fn write_stability(dir: &Path, r: &StabilityReport, tail_epochs: usize) -> Result<String> {
    ensure_dir(dir)?;
    write_csv(
        &dir.join("stability_curves.csv"),
        &["arm", "loss", "seed", "epoch", "val_mae", "val_mse"],
        r.runs.iter().flat_map(|run| {
            run.val_mae.iter().zip(&run.val_mse).enumerate().map(move |(e, (a, b))| {
                vec![run.arm.to_string(), run.loss.to_string(), run.seed.to_string(), e.to_string(), a.to_string(), b.to_string()]
            })
        }),
    )?;
    write_csv(
        &dir.join("stability_bands.csv"),
        &["arm", "loss", "epoch", "mean", "min", "max"],
        r.arms.iter().flat_map(|a| {
            a.band.iter().enumerate().map(move |(e, (m, lo, hi))| {
                vec![a.arm.to_string(), a.loss.to_string(), e.to_string(), m.to_string(), lo.to_string(), hi.to_string()]
            })
        }),
    )?;
    write_csv(
        &dir.join("stability_summary.csv"),
        &["arm", "loss", "runs", "excluded", "median_tail_variance", "median_final_mae"],
        r.arms.iter().map(|a| {
            vec![
                a.arm.to_string(),
                a.loss.to_string(),
                a.runs.to_string(),
                a.excluded.to_string(),
                csv_opt(a.median_tail_variance),
                csv_opt(a.median_final_mae),
            ]
        }),
    )?;
    let text = stability_summary(r, tail_epochs);
    write_text(&dir.join("stability_summary.txt"), &text)?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Per configuration: median MAE and MSE over seeds.
    pub medians: Vec<(AblationFlags, f64, f64)>,
}

impl AblationReport {
    /// Whether the all-on row's median MAE is at most every other row's.
    pub fn full_is_best(&self) -> Option<bool> {
        let full = self.medians.iter().find(|m| m.0 == AblationFlags::FULL)?.1;
        Some(self.medians.iter().all(|m| full <= m.1))
    }
}

pub fn run_ablation(spec: &ExperimentSpec) -> Result<AblationReport> {
    run_ablation_with(spec, |_| {})
}

pub fn run_ablation_with(spec: &ExperimentSpec, mut progress: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    if spec.configurations.is_empty() || spec.seeds.is_empty() {
        return Err(invalid!("ablation needs at least one configuration and one seed"));
    }
    let model = spec.model.resolve()?;
    let ds = spec.data.load()?;
    let mut rows = Vec::new();
    for flags in &spec.configurations {
        for &seed in &spec.seeds {
            let (mut m, tc) = flags.apply(&model, &spec.train);
            m.seed = seed;
            let out = train(&ds, &m, &tc)?;
            let last = out.epoch_rows().last().ok_or_else(|| invalid!("ablation runs need at least one epoch"))?;
            let row = AblationRow {
                flags: *flags,
                seed,
                mae: last.val_mae.unwrap_or(f64::NAN),
                mse: last.val_mse.unwrap_or(f64::NAN),
                diverged: out.diverged.is_some(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    let medians = spec
        .configurations
        .iter()
        .map(|f| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.flags == *f).collect();
            let maes: Vec<f64> = mine.iter().map(|r| r.mae).collect();
            let mses: Vec<f64> = mine.iter().map(|r| r.mse).collect();
            (*f, median(&maes).unwrap_or(f64::NAN), median(&mses).unwrap_or(f64::NAN))
        })
        .collect();
    Ok(AblationReport { rows, medians })
}

pub fn write_ablation(dir: &Path, r: &AblationReport) -> Result<String> {
    ensure_dir(dir)?;
    let yn = |b: bool| if b { "1" } else { "0" }.to_string();
    write_csv(
        &dir.join("ablation.csv"),
        &["CA", "DS", "DT", "PRL", "seed", "MAE", "MSE", "diverged"],
        r.rows.iter().map(|row| {
            vec![
                yn(row.flags.ca),
                yn(row.flags.ds),
                yn(row.flags.dt),
                yn(row.flags.prl),
                row.seed.to_string(),
                row.mae.to_string(),
                row.mse.to_string(),
                yn(row.diverged),
            ]
        }),
    )?;
    write_csv(
        &dir.join("ablation_medians.csv"),
        &["CA", "DS", "DT", "PRL", "median_MAE", "median_MSE"],
        r.medians
            .iter()
            .map(|(f, a, b)| vec![yn(f.ca), yn(f.ds), yn(f.dt), yn(f.prl), a.to_string(), b.to_string()]),
    )?;
    let mut s = String::from("ablation: median over seeds\n");
    for (f, a, b) in &r.medians {
        let _ = writeln!(s, "{}  MAE {a:.4}  MSE {b:.4}", f.label());
    }
    let verdict = match r.full_is_best() {
        Some(true) => "yes",
        Some(false) => "no (reported, not enforced)",
        None => "no full configuration in table",
    };
    let _ = writeln!(s, "full configuration best: {verdict}");
    write_text(&dir.join("ablation_summary.txt"), &s)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub params: ParamReport,
    pub full3d_total: u64,
    pub decomposed_total: u64,
    /// `total − 18.14M`.
    pub delta_vs_reference: f64,
}

pub fn run_decomposition_report(cfg: &ModelConfig) -> Result<DecompositionReport> {
    let params = count_params(cfg)?;
    let full3d_total = params.stages.iter().map(|s| s.full3d).sum();
    let decomposed_total = params.stages.iter().map(|s| s.decomposed).sum();
    Ok(DecompositionReport {
        delta_vs_reference: params.total as f64 - REFERENCE_TOTAL,
        params,
        full3d_total,
        decomposed_total,
    })
}

pub fn decomposition_summary(r: &DecompositionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "temporal stages: {}", r.params.stages.len());
    for StageRatio {
        name,
        full3d,
        decomposed,
        ratio,
        actual_ratio,
        ..
    } in &r.params.stages
    {
        let _ = writeln!(s, "{name}: full3d {full3d}, decomposed {decomposed}, ratio {ratio:.6} (at stage widths {actual_ratio:.6})");
    }
    let _ = writeln!(s, "stage totals: full3d {}, decomposed {}", r.full3d_total, r.decomposed_total);
    let _ = writeln!(s, "model parameters: {}", r.params.total);
    let _ = writeln!(s, "delta vs 18.14M reference: {:+}", r.delta_vs_reference);
    s
}

pub fn write_decomposition(dir: &Path, r: &DecompositionReport) -> Result<String> {
    ensure_dir(dir)?;
    write_csv(
        &dir.join("decomposition_stages.csv"),
        &["stage", "in_channels", "out_channels", "full3d", "decomposed", "ratio", "actual_ratio"],
        r.params.stages.iter().map(|s| {
            vec![
                s.name.clone(),
                s.in_channels.to_string(),
                s.out_channels.to_string(),
                s.full3d.to_string(),
                s.decomposed.to_string(),
                s.ratio.to_string(),
                s.actual_ratio.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("parameters.csv"),
        &["layer", "shape", "count"],
        r.params
            .layers
            .iter()
            .map(|l| vec![l.name.clone(), format!("{:?}", l.shape), l.count.to_string()])
            .chain(std::iter::once(vec!["total".into(), String::new(), r.params.total.to_string()])),
    )?;
    let text = decomposition_summary(r);
    write_text(&dir.join("decomposition_summary.txt"), &text)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_variance_examples() {
        assert_eq!(tail_variance(&[], 0.25), None);
        assert_eq!(tail_variance(&[5.0; 8], 0.25), Some(0.0));
        // Last 2 of 8: 1 and 3 → variance 1.
        assert_eq!(tail_variance(&[9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 1.0, 3.0], 0.25), Some(1.0));
        // ⌈0.25·5⌉ = 2.
        assert_eq!(tail_variance(&[0.0, 0.0, 0.0, 2.0, 4.0], 0.25), Some(1.0));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn each_flag_changes_one_component() {
        let m = ModelConfig::tiny();
        let t = TrainConfig::default();
        let (fm, ft) = AblationFlags::FULL.apply(&m, &t);
        assert_eq!((&fm, &ft), (&m, &t));
        let rows = AblationFlags::leave_one_out();
        let diffs: Vec<(bool, bool, bool, bool)> = rows[1..]
            .iter()
            .map(|f| {
                let (a, b) = f.apply(&m, &t);
                (
                    a.attention != m.attention,
                    a.spatial_block != m.spatial_block,
                    a.temporal_block != m.temporal_block,
                    b != t,
                )
            })
            .collect();
        assert_eq!(
            diffs,
            vec![(true, false, false, false), (false, true, false, false), (false, false, true, false), (false, false, false, true)]
        );
        for f in &rows[1..] {
            let (a, _) = f.apply(&m, &t);
            let mut a2 = a.clone();
            a2.attention = m.attention;
            a2.spatial_block = m.spatial_block.clone();
            a2.temporal_block = m.temporal_block.clone();
            assert_eq!(a2, m);
        }
    }

    #[test]
    fn decomposition_report_matches_count() {
        let cfg = ModelConfig::tiny();
        let r = run_decomposition_report(&cfg).unwrap();
        assert_eq!(r.params.total, count_params(&cfg).unwrap().total);
        assert_eq!(r.params.stages.len(), cfg.dstb_count * 3);
        for s in &r.params.stages {
            assert!((s.ratio - 12.0 / 27.0).abs() < 1e-15);
        }
        let full = run_decomposition_report(&ModelConfig::full()).unwrap();
        assert_eq!(full.delta_vs_reference, full.params.total as f64 - 18_140_000.0);
        assert!(decomposition_summary(&full).contains("delta vs 18.14M reference: +"));
    }

    #[test]
    fn spec_json_defaults() {
        let spec: ExperimentSpec = serde_json::from_str(
            r#"{"name":"s","data":{"synthetic":{"sequences":4}},"model":"tiny","output_dir":"out"}"#,
        )
        .unwrap();
        assert_eq!(spec.seeds, vec![0, 1, 2]);
        assert_eq!(spec.arms, vec![LossKind::Prl, LossKind::PixelwiseL2]);
        assert_eq!(spec.configurations.len(), 5);
        assert_eq!(spec.model.resolve().unwrap(), ModelConfig::tiny());
        assert!(ModelSpec::Preset("huge".into()).resolve().is_err());
    }

    #[test]
    fn run_config_sources() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(RunConfig::load("tiny").unwrap().model.resolve().unwrap(), ModelConfig::tiny());
        let bare = dir.path().join("m.json");
        fs::write(&bare, serde_json::to_string(&ModelConfig::tiny()).unwrap()).unwrap();
        assert_eq!(RunConfig::load(bare.to_str().unwrap()).unwrap().model.resolve().unwrap(), ModelConfig::tiny());
        let run = dir.path().join("r.json");
        fs::write(&run, r#"{"model":"full","train":{"base_lr":0.001}}"#).unwrap();
        let r = RunConfig::load(run.to_str().unwrap()).unwrap();
        assert_eq!(r.train.base_lr, 1e-3);
        assert_eq!(r.train.batch_size, 1);
        assert_eq!(RunConfig::load("missing.json").unwrap_err().code(), "io");
    }
}

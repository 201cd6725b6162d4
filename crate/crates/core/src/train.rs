//! Training loop, validation and the per-step log.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Clip, ClipDataset};
use crate::density::mirror_rows;
use crate::error::{invalid, Error, Result};
use crate::loss::{loss, LossKind, LossReport, PrlConfig};
use crate::model::{backward, forward, forward_traced, ModelConfig, ModelParams};
use crate::optim::{lr_at, AdamConfig, AdamState, DEFAULT_BASE_LR};
use crate::tensor::Tensor;

/// RNG stream for shuffling and flips, separate from initialisation.
pub const DATA_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub prl: PrlConfig,
    pub flip_prob: f64,
    pub val_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            base_lr: DEFAULT_BASE_LR,
            batch_size: 1,
            loss: LossKind::Prl,
            prl: PrlConfig::default(),
            flip_prob: 0.5,
            val_fraction: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(invalid!("base learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid!("flip_prob must lie in [0, 1] and val_fraction in [0, 1)"));
        }
        self.prl.validate()
    }
}

/// One CSV row. Step rows leave the validation columns empty; the epoch row
/// that closes each epoch leaves `step` empty and carries epoch means.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: Option<usize>,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_z: [Option<f64>; 3],
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
}

pub const LOG_HEADER: [&str; 9] = ["epoch", "step", "lr", "loss_total", "loss_z1", "loss_z2", "loss_z3", "val_mae", "val_mse"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LogRow {
    fn record(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.step.map(|s| s.to_string()).unwrap_or_default(),
            self.lr.to_string(),
            self.loss_total.to_string(),
            opt(self.loss_z[0]),
            opt(self.loss_z[1]),
            opt(self.loss_z[2]),
            opt(self.val_mae),
            opt(self.val_mse),
        ]
    }

    pub fn is_epoch_row(&self) -> bool {
        self.step.is_none()
    }
}

pub fn write_log<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn save_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_log(rows, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last successful step.
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    /// Where training stopped on a non-finite loss or gradient.
    pub diverged: Option<(usize, usize)>,
    /// SHA-256 over every shuffle order and flip decision drawn.
    pub data_hash: String,
}

impl TrainOutcome {
    pub fn epoch_rows(&self) -> impl Iterator<Item = &LogRow> {
        self.log.iter().filter(|r| r.is_epoch_row())
    }

    pub fn val_mae_curve(&self) -> Vec<f64> {
        self.epoch_rows().filter_map(|r| r.val_mae).collect()
    }
}

/// Mirrors every frame of a `[T, C, H, W]` clip left-right.
pub fn flip_clip(frames: &Tensor) -> Tensor {
    let w = *frames.shape().last().expect("rank 4");
    let mut out = frames.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Count-level MAE and root-MSE over the given clips.
pub fn evaluate(ds: &ClipDataset, clips: &[Clip], cfg: &ModelConfig, params: &ModelParams) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(clips.len());
    let mut gts = Vec::with_capacity(clips.len());
    for c in clips {
        preds.push(forward(&c.frames, cfg, params)?.sum());
        gts.push(ds.ground_truth(c)?.count());
    }
    crate::loss::mae_mse(&preds, &gts)
}

fn report_z(r: &LossReport) -> [Option<f64>; 3] {
    let mut z = [None; 3];
    for (slot, t) in z.iter_mut().zip(&r.per_patch) {
        *slot = Some(t.value);
    }
    z
}

pub fn train(ds: &ClipDataset, model: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, model, tc, |_| {})
}

/// Trains from a fresh seeded initialisation. `on_epoch` sees every closing
/// epoch row as it is produced.
pub fn train_with(
    ds: &ClipDataset,
    model: &ModelConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    model.validate()?;
    tc.validate()?;
    if ds.depth != model.depth {
        return Err(invalid!("dataset clips have {} frames but the model expects {}", ds.depth, model.depth));
    }
    let split = ds.split_index(tc.val_fraction);
    if split == 0 {
        return Err(invalid!("no training clips after holding out validation"));
    }
    let (train_clips, val_clips) = ds.clips.split_at(split);
    let gts: Vec<Tensor> = train_clips
        .iter()
        .map(|c| Ok(ds.ground_truth(c)?.into_values()))
        .collect::<Result<_>>()?;

    let mut params = ModelParams::init(model)?;
    let mut adam = AdamState::new(params.tensors(), tc.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(DATA_STREAM);
    let mut hasher = Sha256::new();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_clips.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc.base_lr);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| rng.gen_bool(tc.flip_prob)).collect();
        for (&i, &f) in order.iter().zip(&flips) {
            hasher.update((i as u64).to_le_bytes());
            hasher.update([u8::from(f)]);
        }

        let (mut sum_total, mut sum_z, mut batches) = (0.0, [0.0; 3], 0usize);
        for (batch, batch_flips) in order.chunks(tc.batch_size).zip(flips.chunks(tc.batch_size)) {
            let mut traces = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for (&i, &flip) in batch.iter().zip(batch_flips) {
                let (x, y) = if flip {
                    (flip_clip(&train_clips[i].frames), mirror_rows(&gts[i]))
                } else {
                    (train_clips[i].frames.clone(), gts[i].clone())
                };
                traces.push(forward_traced(&x, model, &params)?);
                targets.push(y);
            }
            let outputs: Vec<Tensor> = traces.iter().map(|t| t.output.clone()).collect();
            let (report, grads) = loss(tc.loss, &outputs, &targets, &tc.prl)?;
            if !report.total.is_finite() {
                return Ok(diverged(params, log, epoch, step, hasher));
            }
            let mut total: Option<ModelParams> = None;
            for (tr, g) in traces.iter().zip(&grads) {
                let gp = backward(model, &params, tr, g)?;
                match &mut total {
                    None => total = Some(gp),
                    Some(acc) => {
                        for (a, b) in acc.tensors_mut().into_iter().zip(gp.tensors()) {
                            a.add_assign(b)?;
                        }
                    }
                }
            }
            let total = total.expect("nonempty batch");
            let grad_refs = total.tensors();
            let mut slots = params.tensors_mut();
            match adam.step(&mut slots, &grad_refs, lr) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    drop(slots);
                    return Ok(diverged(params, log, epoch, step, hasher));
                }
                Err(e) => return Err(e),
            }
            drop(slots);
            if !params.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }

            let z = report_z(&report);
            log.push(LogRow {
                epoch,
                step: Some(step),
                lr,
                loss_total: report.total,
                loss_z: z,
                val_mae: None,
                val_mse: None,
            });
            sum_total += report.total;
            for (s, v) in sum_z.iter_mut().zip(z) {
                *s += v.unwrap_or(0.0);
            }
            batches += 1;
            step += 1;
        }

        let (val_mae, val_mse) = if val_clips.is_empty() {
            (None, None)
        } else {
            let (a, b) = evaluate(ds, val_clips, model, &params)?;
            (Some(a), Some(b))
        };
        let n = batches.max(1) as f64;
        let has_z = tc.loss == LossKind::Prl;
        let row = LogRow {
            epoch,
            step: None,
            lr,
            loss_total: sum_total / n,
            loss_z: std::array::from_fn(|k| (has_z && k < tc.prl.n_p).then(|| sum_z[k] / n)),
            val_mae,
            val_mse,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome {
        params,
        log,
        diverged: None,
        data_hash: hex(hasher),
    })
}

fn hex(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn diverged(params: ModelParams, log: Vec<LogRow>, epoch: usize, step: usize, hasher: Sha256) -> TrainOutcome {
    TrainOutcome {
        params,
        log,
        diverged: Some((epoch, step)),
        data_hash: hex(hasher),
    }
}

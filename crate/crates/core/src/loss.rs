//! Training losses and count metrics.
//!
//! Maps are rank-2 `[H, W]` rasters. Every loss returns its report together
//! with the gradient with respect to each prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "prl")]
    Prl,
    #[serde(rename = "l2")]
    PixelwiseL2,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Prl => "prl",
            LossKind::PixelwiseL2 => "l2",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prl" => Ok(LossKind::Prl),
            "l2" | "pixelwise_l2" => Ok(LossKind::PixelwiseL2),
            other => Err(invalid!("unknown loss kind {other:?} (expected prl or l2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrlConfig {
    pub n_p: usize,
    pub lambdas: Vec<f64>,
    pub sigma: f64,
}

impl Default for PrlConfig {
    fn default() -> Self {
        Self {
            n_p: 3,
            lambdas: vec![1.0, 15.0, 3.0],
            sigma: 1.0,
        }
    }
}

impl PrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.lambdas.len() != self.n_p {
            return Err(invalid!("PRL needs n_p >= 1 weights, got n_p={} and {:?}", self.n_p, self.lambdas));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(invalid!("PRL weights must be finite and nonnegative: {:?}", self.lambdas));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(invalid!("PRL sigma must be positive, got {}", self.sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchTerm {
    pub z: usize,
    pub lambda: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Empty for the pixel-wise loss.
    pub per_patch: Vec<PatchTerm>,
    pub kind: LossKind,
}

fn check_pairs(pred: &[Tensor], gt: &[Tensor]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(invalid!("loss needs equal nonempty batches, got {} predictions and {} targets", pred.len(), gt.len()));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.rank() != 2 {
            return Err(invalid!("loss expects [H, W] maps, got {:?}", p.shape()));
        }
        p.check_same("loss", g)?;
    }
    Ok(())
}

/// `(1/2N) Σ ‖pred − gt‖²` with gradient `(pred − gt)/N`.
pub fn pixelwise_l2(pred: &[Tensor], gt: &[Tensor]) -> Result<(LossReport, Vec<Tensor>)> {
    check_pairs(pred, gt)?;
    let nb = pred.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let mut grad = Tensor::zeros(p.shape().to_vec());
        for ((o, a), b) in grad.data_mut().iter_mut().zip(p.data()).zip(g.data()) {
            let d = a - b;
            total += d * d;
            *o = d / nb;
        }
        grads.push(grad);
    }
    Ok((
        LossReport {
            total: total / (2.0 * nb),
            per_patch: Vec::new(),
            kind: LossKind::PixelwiseL2,
        },
        grads,
    ))
}

/// `(2z−1)²` Gaussian sampled at integer offsets and renormalized to sum 1.
pub fn smoothing_kernel(z: usize, sigma: f64) -> Result<Tensor> {
    if z == 0 {
        return Err(invalid!("smoothing kernel needs z >= 1"));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid!("smoothing sigma must be positive, got {sigma}"));
    }
    let n = 2 * z - 1;
    let c = (z - 1) as f64;
    let mut k = Tensor::from_fn(vec![n, n], |i| {
        let (dy, dx) = ((i / n) as f64 - c, (i % n) as f64 - c);
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let s = k.sum();
    k.data_mut().iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Same-size correlation with zero padding. The kernels used here are
/// symmetric, so this is also their convolution and its own adjoint.
pub fn smooth(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let &[h, w] = x.shape() else {
        return Err(invalid!("smooth expects [H, W], got {:?}", x.shape()));
    };
    let &[kn, km] = kernel.shape() else {
        return Err(invalid!("kernel must be square and odd, got {:?}", kernel.shape()));
    };
    if kn != km || kn % 2 == 0 {
        return Err(invalid!("kernel must be square and odd, got {:?}", kernel.shape()));
    }
    if kn == 1 {
        return Ok(x.map(|v| v * kernel.data()[0]));
    }
    let r = (kn / 2) as isize;
    let (src, k) = (x.data(), kernel.data());
    let mut out = Tensor::zeros(vec![h, w]);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for a in -r..=r {
                let y = i + a;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for b in -r..=r {
                    let xx = j + b;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += k[((a + r) as usize) * kn + (b + r) as usize] * src[y as usize * w + xx as usize];
                }
            }
            out.data_mut()[i as usize * w + j as usize] = acc;
        }
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Patch-wise regression loss: weighted ℓ1 distances between Gaussian-smoothed
/// prediction and target at patch scales `z = 1..=n_p`.
pub fn prl(pred: &[Tensor], gt: &[Tensor], cfg: &PrlConfig) -> Result<(LossReport, Vec<Tensor>)> {
    cfg.validate()?;
    check_pairs(pred, gt)?;
    let nb = pred.len() as f64;
    let diffs: Vec<Tensor> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| crate::tensor::sub(p, g))
        .collect::<Result<_>>()?;
    let mut grads: Vec<Tensor> = pred.iter().map(Tensor::zeros_like).collect();
    let mut per_patch = Vec::with_capacity(cfg.n_p);
    let mut total = 0.0;
    for (zi, &lambda) in cfg.lambdas.iter().enumerate() {
        let z = zi + 1;
        let kernel = smoothing_kernel(z, cfg.sigma)?;
        let mut value = 0.0;
        for (d, grad) in diffs.iter().zip(&mut grads) {
            let sd = smooth(d, &kernel)?;
            value += sd.l1_norm();
            if lambda != 0.0 {
                let back = smooth(&sd.map(sign), &kernel)?;
                for (o, b) in grad.data_mut().iter_mut().zip(back.data()) {
                    *o += lambda * b / nb;
                }
            }
        }
        value /= nb;
        total += lambda * value;
        per_patch.push(PatchTerm { z, lambda, value });
    }
    Ok((
        LossReport {
            total,
            per_patch,
            kind: LossKind::Prl,
        },
        grads,
    ))
}

pub fn loss(kind: LossKind, pred: &[Tensor], gt: &[Tensor], cfg: &PrlConfig) -> Result<(LossReport, Vec<Tensor>)> {
    match kind {
        LossKind::Prl => prl(pred, gt, cfg),
        LossKind::PixelwiseL2 => pixelwise_l2(pred, gt),
    }
}

/// Mean absolute count error and root mean squared count error.
pub fn mae_mse(preds: &[f64], gts: &[f64]) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(invalid!("mae_mse needs equal nonempty inputs, got {} and {}", preds.len(), gts.len()));
    }
    let n = preds.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

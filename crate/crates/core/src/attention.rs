//! Channel attention: global average pooling, a two-layer bias-free gate
//! `α = sigmoid(W2 · relu(W1 · a))`, and channelwise rescaling.
//!
//! The temporal block pools over `D × H × W` and produces one gate per
//! channel. The spatial block pools over `H × W` only, so on a `[C, D, H, W]`
//! volume it produces one gate vector per time slot (shared weights).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::{matvec, matvec_backward, relu, sigmoid, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[C/ρ, C]`
    pub w1: Tensor,
    /// `[C, C/ρ]`
    pub w2: Tensor,
}

impl AttentionParams {
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        channels.div_ceil(reduction.max(1)).max(1)
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = Self::hidden_width(channels, reduction);
        Self {
            w1: Tensor::zeros(vec![hidden, channels]),
            w2: Tensor::zeros(vec![channels, hidden]),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, reduction);
        let hidden = p.hidden();
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("finite std");
        p.w1.data_mut().iter_mut().for_each(|v| *v = n1.sample(rng));
        p.w2.data_mut().iter_mut().for_each(|v| *v = n2.sample(rng));
        p
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    fn check(&self) -> Result<()> {
        let (h, c) = (self.w1.shape()[0], self.w1.shape()[1]);
        if self.w1.rank() != 2 || self.w2.shape() != [c, h] {
            return Err(Error::shape("attention params", self.w1.shape(), self.w2.shape()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub a: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Per-channel mean over `D × H × W` of a `[C, D, H, W]` volume.
pub fn gap_temporal(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(invalid!("gap_temporal expects [C, D, H, W], got {:?}", x.shape()));
    }
    Ok(channel_means(x))
}

/// Per-channel mean over `H × W` of a `[C, H, W]` map.
pub fn gap_spatial(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(invalid!("gap_spatial expects [C, H, W], got {:?}", x.shape()));
    }
    Ok(channel_means(x))
}

fn channel_means(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let n = x.len() / c;
    Tensor::from_vec(
        x.data()
            .chunks_exact(n)
            .map(|ch| ch.iter().sum::<f64>() / n as f64)
            .collect(),
    )
}

pub fn attention_gate(a: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    p.check()?;
    let hidden = relu(&matvec(&p.w1, a)?);
    Ok(sigmoid(&matvec(&p.w2, &hidden)?))
}

pub fn attention_gate_backward(
    a: &Tensor,
    p: &AttentionParams,
    upstream: &Tensor,
) -> Result<GateGrads> {
    p.check()?;
    let pre = matvec(&p.w1, a)?;
    let hidden = relu(&pre);
    let alpha = sigmoid(&matvec(&p.w2, &hidden)?);
    alpha.check_same("attention gate upstream", upstream)?;
    let g_z = Tensor::from_fn(vec![alpha.len()], |i| {
        let s = alpha.data()[i];
        upstream.data()[i] * s * (1.0 - s)
    });
    let (w2, g_hidden) = matvec_backward(&p.w2, &hidden, &g_z)?;
    let g_pre = Tensor::from_fn(vec![pre.len()], |i| {
        if pre.data()[i] > 0.0 {
            g_hidden.data()[i]
        } else {
            0.0
        }
    });
    let (w1, a_grad) = matvec_backward(&p.w1, a, &g_pre)?;
    Ok(GateGrads { a: a_grad, w1, w2 })
}

/// `out[c, …] = α[c] · x[c, …]`.
pub fn channel_scale(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    if alpha.rank() != 1 || x.shape()[0] != alpha.len() {
        return Err(Error::shape("channel_scale", x.shape(), alpha.shape()));
    }
    let n = x.len() / alpha.len();
    let mut out = x.clone();
    for (ch, &s) in out.data_mut().chunks_exact_mut(n).zip(alpha.data()) {
        ch.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Returns `(dL/dx, dL/dα)`.
pub fn channel_scale_backward(
    x: &Tensor,
    alpha: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    x.check_same("channel_scale_backward", upstream)?;
    let gx = channel_scale(upstream, alpha)?;
    let n = x.len() / alpha.len();
    let galpha = Tensor::from_vec(
        x.data()
            .chunks_exact(n)
            .zip(upstream.data().chunks_exact(n))
            .map(|(xc, gc)| xc.iter().zip(gc).map(|(a, b)| a * b).sum())
            .collect(),
    );
    Ok((gx, galpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// One gate from the mean over `D × H × W`.
    Spatiotemporal,
    /// One gate per time slot from the mean over `H × W`.
    PerFrame,
}

/// Applies attention to `x: [C, D, H, W]`. Returns the rescaled volume and
/// the gate values (`[C]` or `[D, C]`).
pub fn attention_forward(
    x: &Tensor,
    p: &AttentionParams,
    pooling: Pooling,
) -> Result<(Tensor, Tensor)> {
    let [c, d, h, w] = dims4(x)?;
    if p.channels() != c {
        return Err(Error::shape("attention channels", x.shape(), p.w1.shape()));
    }
    match pooling {
        Pooling::Spatiotemporal => {
            let alpha = attention_gate(&gap_temporal(x)?, p)?;
            Ok((channel_scale(x, &alpha)?, alpha))
        }
        Pooling::PerFrame => {
            let hw = h * w;
            let mut out = x.clone();
            let mut alphas = Vec::with_capacity(d * c);
            for s in 0..d {
                let a = Tensor::from_fn(vec![c], |ci| {
                    let base = (ci * d + s) * hw;
                    x.data()[base..base + hw].iter().sum::<f64>() / hw as f64
                });
                let alpha = attention_gate(&a, p)?;
                for ci in 0..c {
                    let base = (ci * d + s) * hw;
                    let k = alpha.data()[ci];
                    out.data_mut()[base..base + hw].iter_mut().for_each(|v| *v *= k);
                }
                alphas.extend_from_slice(alpha.data());
            }
            Ok((out, Tensor::new(vec![d, c], alphas)?))
        }
    }
}

/// Returns `dL/dx` and the gradients of `W1`, `W2`.
pub fn attention_backward(
    x: &Tensor,
    p: &AttentionParams,
    pooling: Pooling,
    upstream: &Tensor,
) -> Result<(Tensor, AttentionParams)> {
    let [c, d, h, w] = dims4(x)?;
    x.check_same("attention upstream", upstream)?;
    match pooling {
        Pooling::Spatiotemporal => {
            let a = gap_temporal(x)?;
            let alpha = attention_gate(&a, p)?;
            let (mut gx, galpha) = channel_scale_backward(x, &alpha, upstream)?;
            let gg = attention_gate_backward(&a, p, &galpha)?;
            let n = d * h * w;
            for (ch, ga) in gx.data_mut().chunks_exact_mut(n).zip(gg.a.data()) {
                let share = ga / n as f64;
                ch.iter_mut().for_each(|v| *v += share);
            }
            Ok((gx, AttentionParams { w1: gg.w1, w2: gg.w2 }))
        }
        Pooling::PerFrame => {
            let hw = h * w;
            let mut gx = Tensor::zeros(x.shape().to_vec());
            let mut grads = AttentionParams {
                w1: Tensor::zeros_like(&p.w1),
                w2: Tensor::zeros_like(&p.w2),
            };
            for s in 0..d {
                let a = Tensor::from_fn(vec![c], |ci| {
                    let base = (ci * d + s) * hw;
                    x.data()[base..base + hw].iter().sum::<f64>() / hw as f64
                });
                let alpha = attention_gate(&a, p)?;
                let galpha = Tensor::from_fn(vec![c], |ci| {
                    let base = (ci * d + s) * hw;
                    x.data()[base..base + hw]
                        .iter()
                        .zip(&upstream.data()[base..base + hw])
                        .map(|(a, b)| a * b)
                        .sum()
                });
                let gg = attention_gate_backward(&a, p, &galpha)?;
                for ci in 0..c {
                    let base = (ci * d + s) * hw;
                    let k = alpha.data()[ci];
                    let share = gg.a.data()[ci] / hw as f64;
                    let (gxs, ups) = (
                        &mut gx.data_mut()[base..base + hw],
                        &upstream.data()[base..base + hw],
                    );
                    for (g, u) in gxs.iter_mut().zip(ups) {
                        *g = k * u + share;
                    }
                }
                grads.w1.add_assign(&gg.w1)?;
                grads.w2.add_assign(&gg.w2)?;
            }
            Ok((gx, grads))
        }
    }
}

fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(invalid!("attention expects [C, D, H, W], got {:?}", x.shape())),
    }
}

//! Dilated convolutions over `[C, D, H, W]` feature volumes.
//!
//! One kernel shape covers all three cases: a spatial 2D conv is a
//! `1 × k × k` kernel shared across time slots, a temporal 1D conv is
//! `k × 1 × 1`, and the full 3D conv is `k × k × k`. Padding is always
//! "same" with zeros, so D, H and W are preserved.
//!
//! [`ConvAlgo::Direct`] is the reference loop nest; [`ConvAlgo::Gemm`]
//! lowers to im2col + matrix multiply and must agree with it to 1e-12.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Spatial2d,
    Temporal1d,
    Full3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Gemm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    /// `(n_t, n_s1, n_s2)`, all odd.
    pub kernel: [usize; 3],
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn spatial(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        Self {
            kernel: [1, k, k],
            dilation,
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn temporal(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        Self {
            kernel: [k, 1, 1],
            dilation,
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn full3d(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> Self {
        Self {
            kernel: [k, k, k],
            dilation,
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::spatial(in_channels, out_channels, 1, 1)
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [t, h, w] = self.kernel;
        [self.out_channels, self.in_channels, t, h, w]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.taps()
            + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(invalid!("kernel extents must be odd, got {:?}", self.kernel));
        }
        if self.dilation == 0 {
            return Err(invalid!("dilation must be at least 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        Ok(())
    }

    fn check_kind(&self, kind: ConvKind) -> Result<()> {
        self.validate()?;
        let [t, h, w] = self.kernel;
        let ok = match kind {
            ConvKind::Spatial2d => t == 1,
            ConvKind::Temporal1d => h == 1 && w == 1,
            ConvKind::Full3d => true,
        };
        if !ok {
            return Err(invalid!("kernel {:?} is not a {kind:?} kernel", self.kernel));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// `[out_c, in_c, n_t, n_s1, n_s2]`
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl ConvWeights {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            w: Tensor::zeros(spec.weight_shape().to_vec()),
            b: spec.bias.then(|| Tensor::zeros(vec![spec.out_channels])),
        }
    }

    /// Fan-in scaled normal weights, `std = sqrt(2 / (in_c · taps))`, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Self {
        let fan_in = (spec.in_channels * spec.taps()) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut wts = Self::zeros(spec);
        for v in wts.w.data_mut() {
            *v = normal.sample(rng);
        }
        wts
    }

    pub fn check(&self, spec: &ConvSpec) -> Result<()> {
        self.w.check_shape("conv weights", &spec.weight_shape())?;
        match (&self.b, spec.bias) {
            (Some(b), true) => b.check_shape("conv bias", &[spec.out_channels]),
            (None, false) => Ok(()),
            _ => Err(invalid!("bias presence does not match conv spec")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Option<Tensor>,
}

/// Full 3D dilated convolution, direct loops. `x: [C_in, D, H, W]`.
pub fn conv3d_dilated(x: &Tensor, spec: &ConvSpec, wts: &ConvWeights) -> Result<Tensor> {
    conv_forward(ConvKind::Full3d, x, spec, wts, ConvAlgo::Direct)
}

/// Spatial conv shared over time slots. Accepts `[C, H, W]` or `[C, D, H, W]`.
pub fn conv2d_dilated(x: &Tensor, spec: &ConvSpec, wts: &ConvWeights) -> Result<Tensor> {
    conv_forward(ConvKind::Spatial2d, x, spec, wts, ConvAlgo::Direct)
}

/// Temporal conv with dilation along D. `x: [C, D, H, W]`.
pub fn conv1d_temporal(x: &Tensor, spec: &ConvSpec, wts: &ConvWeights) -> Result<Tensor> {
    conv_forward(ConvKind::Temporal1d, x, spec, wts, ConvAlgo::Direct)
}

/// Reference backward pass (direct loops) for any kind.
pub fn conv_backward(
    kind: ConvKind,
    x: &Tensor,
    spec: &ConvSpec,
    wts: &ConvWeights,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    conv_backward_with(kind, x, spec, wts, upstream, ConvAlgo::Direct)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    r: isize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.kt * self.kh * self.kw
    }

    /// Input offsets of tap `(lt, lh, lw)` relative to the output position.
    fn offsets(&self, lt: usize, lh: usize, lw: usize) -> (isize, isize, isize) {
        let c = |l: usize, k: usize| self.r * (l as isize - (k / 2) as isize);
        (c(lt, self.kt), c(lh, self.kh), c(lw, self.kw))
    }
}

/// Output positions `o` along an axis of length `n` with `o + off` in range.
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Shape check; returns the geometry and whether the input was rank 3.
fn geometry(kind: ConvKind, x: &Tensor, spec: &ConvSpec, wts: &ConvWeights) -> Result<(Geometry, bool)> {
    spec.check_kind(kind)?;
    wts.check(spec)?;
    let (dims, rank3) = match (kind, x.shape()) {
        (ConvKind::Spatial2d, &[c, h, w]) => ([c, 1, h, w], true),
        (_, &[c, d, h, w]) => ([c, d, h, w], false),
        _ => {
            return Err(invalid!(
                "{kind:?} conv expects a [C, D, H, W] input, got {:?}",
                x.shape()
            ))
        }
    };
    if dims[0] != spec.in_channels {
        return Err(Error::shape(
            "conv input channels",
            x.shape(),
            &[spec.in_channels],
        ));
    }
    let [kt, kh, kw] = spec.kernel;
    Ok((
        Geometry {
            cin: dims[0],
            cout: spec.out_channels,
            d: dims[1],
            h: dims[2],
            w: dims[3],
            kt,
            kh,
            kw,
            r: spec.dilation as isize,
        },
        rank3,
    ))
}

fn output_shape(g: &Geometry, rank3: bool, channels: usize) -> Vec<usize> {
    if rank3 {
        vec![channels, g.h, g.w]
    } else {
        vec![channels, g.d, g.h, g.w]
    }
}

pub fn conv_forward(
    kind: ConvKind,
    x: &Tensor,
    spec: &ConvSpec,
    wts: &ConvWeights,
    algo: ConvAlgo,
) -> Result<Tensor> {
    let (g, rank3) = geometry(kind, x, spec, wts)?;
    let out = match algo {
        ConvAlgo::Direct => direct_forward(&g, x.data(), wts),
        ConvAlgo::Gemm => gemm_forward(&g, x.data(), wts),
    };
    Tensor::new(output_shape(&g, rank3, g.cout), out)
}

pub fn conv_backward_with(
    kind: ConvKind,
    x: &Tensor,
    spec: &ConvSpec,
    wts: &ConvWeights,
    upstream: &Tensor,
    algo: ConvAlgo,
) -> Result<ConvGrads> {
    let (g, rank3) = geometry(kind, x, spec, wts)?;
    upstream.check_shape("conv upstream gradient", &output_shape(&g, rank3, g.cout))?;
    let (gx, gw, gb) = match algo {
        ConvAlgo::Direct => direct_backward(&g, x.data(), wts, upstream.data()),
        ConvAlgo::Gemm => gemm_backward(&g, x.data(), wts, upstream.data()),
    };
    Ok(ConvGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        w: Tensor::new(spec.weight_shape().to_vec(), gw)?,
        b: spec
            .bias
            .then(|| Tensor::new(vec![g.cout], gb))
            .transpose()?,
    })
}

fn direct_forward(g: &Geometry, x: &[f64], wts: &ConvWeights) -> Vec<f64> {
    let (d_, h_, w_) = (g.d as isize, g.h as isize, g.w as isize);
    let taps = g.taps();
    let w = wts.w.data();
    let mut out = vec![0.0; g.cout * g.plane()];
    let mut idx = 0;
    for co in 0..g.cout {
        let bias = wts.b.as_ref().map_or(0.0, |b| b.data()[co]);
        for s in 0..d_ {
            for i in 0..h_ {
                for j in 0..w_ {
                    let mut acc = bias;
                    for ci in 0..g.cin {
                        let kbase = (co * g.cin + ci) * taps;
                        let xbase = ci * g.plane();
                        for lt in 0..g.kt {
                            for lh in 0..g.kh {
                                for lw in 0..g.kw {
                                    let (ot, oh, ow) = g.offsets(lt, lh, lw);
                                    let (ss, si, sj) = (s + ot, i + oh, j + ow);
                                    if ss < 0 || ss >= d_ || si < 0 || si >= h_ || sj < 0 || sj >= w_ {
                                        continue;
                                    }
                                    let xi = xbase
                                        + ((ss * h_ + si) * w_ + sj) as usize;
                                    let k = kbase + (lt * g.kh + lh) * g.kw + lw;
                                    acc += w[k] * x[xi];
                                }
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

fn direct_backward(
    g: &Geometry,
    x: &[f64],
    wts: &ConvWeights,
    up: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (d_, h_, w_) = (g.d as isize, g.h as isize, g.w as isize);
    let taps = g.taps();
    let w = wts.w.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];
    let mut idx = 0;
    for co in 0..g.cout {
        for s in 0..d_ {
            for i in 0..h_ {
                for j in 0..w_ {
                    let gy = up[idx];
                    idx += 1;
                    gb[co] += gy;
                    for ci in 0..g.cin {
                        let kbase = (co * g.cin + ci) * taps;
                        let xbase = ci * g.plane();
                        for lt in 0..g.kt {
                            for lh in 0..g.kh {
                                for lw in 0..g.kw {
                                    let (ot, oh, ow) = g.offsets(lt, lh, lw);
                                    let (ss, si, sj) = (s + ot, i + oh, j + ow);
                                    if ss < 0 || ss >= d_ || si < 0 || si >= h_ || sj < 0 || sj >= w_ {
                                        continue;
                                    }
                                    let xi = xbase + ((ss * h_ + si) * w_ + sj) as usize;
                                    let k = kbase + (lt * g.kh + lh) * g.kw + lw;
                                    gw[k] += gy * x[xi];
                                    gx[xi] += gy * w[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Calls `f(dst_offset, src_offset, len)` for every contiguous row segment
/// linking a column-matrix row (tap `t` of channel `ci`) to the input volume.
fn for_each_segment(g: &Geometry, tap: usize, mut f: impl FnMut(usize, usize, usize)) {
    let lw = tap % g.kw;
    let lh = (tap / g.kw) % g.kh;
    let lt = tap / (g.kw * g.kh);
    let (ot, oh, ow) = g.offsets(lt, lh, lw);
    let (s0, s1) = valid_range(g.d, ot);
    let (i0, i1) = valid_range(g.h, oh);
    let (j0, j1) = valid_range(g.w, ow);
    if j0 >= j1 {
        return;
    }
    for s in s0..s1 {
        let ss = (s as isize + ot) as usize;
        for i in i0..i1 {
            let si = (i as isize + oh) as usize;
            let dst = (s * g.h + i) * g.w + j0;
            let src = (ss * g.h + si) * g.w + (j0 as isize + ow) as usize;
            f(dst, src, j1 - j0);
        }
    }
}

fn im2col(g: &Geometry, x: &[f64]) -> Vec<f64> {
    let p = g.plane();
    let taps = g.taps();
    let mut cols = vec![0.0; g.cin * taps * p];
    for ci in 0..g.cin {
        let xc = &x[ci * p..(ci + 1) * p];
        for t in 0..taps {
            let row = &mut cols[(ci * taps + t) * p..(ci * taps + t + 1) * p];
            for_each_segment(g, t, |dst, src, n| {
                row[dst..dst + n].copy_from_slice(&xc[src..src + n]);
            });
        }
    }
    cols
}

fn col2im(g: &Geometry, cols: &[f64]) -> Vec<f64> {
    let p = g.plane();
    let taps = g.taps();
    let mut gx = vec![0.0; g.cin * p];
    for ci in 0..g.cin {
        let gc = &mut gx[ci * p..(ci + 1) * p];
        for t in 0..taps {
            let row = &cols[(ci * taps + t) * p..(ci * taps + t + 1) * p];
            for_each_segment(g, t, |dst, src, n| {
                for (a, b) in gc[src..src + n].iter_mut().zip(&row[dst..dst + n]) {
                    *a += b;
                }
            });
        }
    }
    gx
}

fn gemm_forward(g: &Geometry, x: &[f64], wts: &ConvWeights) -> Vec<f64> {
    let p = g.plane();
    let k = g.cin * g.taps();
    let owned;
    let cols: &[f64] = if g.taps() == 1 {
        x
    } else {
        owned = im2col(g, x);
        &owned
    };
    let mut out = vec![0.0; g.cout * p];
    if let Some(b) = &wts.b {
        for (row, &bv) in out.chunks_exact_mut(p).zip(b.data()) {
            row.fill(bv);
        }
    }
    gemm(g.cout, k, p, wts.w.data(), false, cols, false, &mut out, 1.0);
    out
}

fn gemm_backward(
    g: &Geometry,
    x: &[f64],
    wts: &ConvWeights,
    up: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.plane();
    let k = g.cin * g.taps();
    let gb = up.chunks_exact(p).map(|row| row.iter().sum()).collect();
    let owned;
    let cols: &[f64] = if g.taps() == 1 {
        x
    } else {
        owned = im2col(g, x);
        &owned
    };
    let mut gw = vec![0.0; g.cout * k];
    gemm(g.cout, p, k, up, false, cols, true, &mut gw, 0.0);
    let mut gcols = vec![0.0; k * p];
    gemm(k, g.cout, p, wts.w.data(), true, up, false, &mut gcols, 0.0);
    let gx = if g.taps() == 1 { gcols } else { col2im(g, &gcols) };
    (gx, gw, gb)
}

/// `C = A·B + beta·C` with row-major storage. `a_t` / `b_t` mean the operand
/// is stored transposed (`k × m` / `n × k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm output size");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given the
    // row/column strides, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Weight counts of a full `n_t × n_s1 × n_s2` conv versus its spatial +
/// temporal factorization (intermediate width = `c_out`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionCount {
    pub full3d: u64,
    pub decomposed: u64,
    pub ratio: f64,
}

pub fn decomposition_param_count(
    n_t: usize,
    n_s1: usize,
    n_s2: usize,
    c_in: usize,
    c_out: usize,
    bias: bool,
) -> DecompositionCount {
    let (nt, s1, s2, ci, co) = (n_t as u64, n_s1 as u64, n_s2 as u64, c_in as u64, c_out as u64);
    let b = u64::from(bias);
    let c_mid = co;
    let full3d = co * ci * nt * s1 * s2 + b * co;
    let decomposed = c_mid * ci * s1 * s2 + b * c_mid + co * c_mid * nt + b * co;
    DecompositionCount {
        full3d,
        decomposed,
        ratio: decomposed as f64 / full3d as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_weights(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ConvWeights {
        ConvWeights {
            w: random(spec.weight_shape().to_vec(), rng),
            b: spec.bias.then(|| random(vec![spec.out_channels], rng)),
        }
    }

    /// Six nested loops over (co, s, i, j, l, m, n) in the textbook form, with
    /// explicit signed kernel offsets rather than index tables.
    fn naive(x: &Tensor, spec: &ConvSpec, wts: &ConvWeights) -> Tensor {
        let [c, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [kt, kh, kw] = spec.kernel;
        let (lt, lh, lw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        let r = spec.dilation as isize;
        let mut y = Tensor::zeros(vec![spec.out_channels, d, h, w]);
        for co in 0..spec.out_channels {
            for s in 0..d as isize {
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let mut acc = wts.b.as_ref().map_or(0.0, |b| b.data()[co]);
                        for ci in 0..c {
                            for l in -lt..=lt {
                                for m in -lh..=lh {
                                    for n in -lw..=lw {
                                        let (a, b2, e) = (s + r * l, i + r * m, j + r * n);
                                        if a < 0 || b2 < 0 || e < 0 || a >= d as isize || b2 >= h as isize || e >= w as isize {
                                            continue;
                                        }
                                        let wv = wts.w.get(&[co, ci, (l + lt) as usize, (m + lh) as usize, (n + lw) as usize]);
                                        acc += wv * x.get(&[ci, a as usize, b2 as usize, e as usize]);
                                    }
                                }
                            }
                        }
                        y.set(&[co, s as usize, i as usize, j as usize], acc);
                    }
                }
            }
        }
        y
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut r = rng(1);
        let x = random(vec![1, 3, 4, 5], &mut r);
        let spec = ConvSpec::full3d(1, 1, 3, 1).with_bias(false);
        let mut wts = ConvWeights::zeros(&spec);
        wts.w.set(&[0, 0, 1, 1, 1], 1.0);
        assert_eq!(conv3d_dilated(&x, &spec, &wts).unwrap(), x);
    }

    #[test]
    fn all_ones_interior_counts_taps() {
        let x = Tensor::full(vec![1, 3, 5, 5], 1.0);
        let spec = ConvSpec::full3d(1, 1, 3, 1).with_bias(false);
        let wts = ConvWeights {
            w: Tensor::full(spec.weight_shape().to_vec(), 1.0),
            b: None,
        };
        let y = conv3d_dilated(&x, &spec, &wts).unwrap();
        assert_eq!(y.get(&[0, 1, 2, 2]), 27.0);
    }

    #[test]
    fn three_d_matches_naive_loops() {
        let mut r = rng(2);
        let x = random(vec![2, 4, 6, 6], &mut r);
        let spec = ConvSpec::full3d(2, 3, 3, 2);
        let wts = random_weights(&spec, &mut r);
        let y = conv3d_dilated(&x, &spec, &wts).unwrap();
        assert!(max_diff(&y, &naive(&x, &spec, &wts)) < 1e-12);
    }

    #[test]
    fn spatial_tap_counting() {
        let x = Tensor::full(vec![1, 5, 5], 1.0);
        let ones = |spec: &ConvSpec| ConvWeights {
            w: Tensor::full(spec.weight_shape().to_vec(), 1.0),
            b: None,
        };
        let s1 = ConvSpec::spatial(1, 1, 3, 1).with_bias(false);
        let y = conv2d_dilated(&x, &s1, &ones(&s1)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.get(&[0, 2, 2]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        let s2 = ConvSpec::spatial(1, 1, 3, 2).with_bias(false);
        assert_eq!(conv2d_dilated(&x, &s2, &ones(&s2)).unwrap().get(&[0, 2, 2]), 9.0);
    }

    #[test]
    fn spatial_weights_shared_over_time() {
        let mut r = rng(3);
        let frame = random(vec![2, 1, 5, 5], &mut r);
        let x = Tensor::concat0(&[&frame, &frame, &frame])
            .unwrap()
            .into_shape(vec![3, 2, 5, 5])
            .unwrap();
        // [3 frames, 2 ch] -> [2 ch, 3 frames]
        let mut xc = Tensor::zeros(vec![2, 3, 5, 5]);
        for t in 0..3 {
            for c in 0..2 {
                for i in 0..5 {
                    for j in 0..5 {
                        xc.set(&[c, t, i, j], x.get(&[t, c, i, j]));
                    }
                }
            }
        }
        let spec = ConvSpec::spatial(2, 2, 3, 1);
        let wts = random_weights(&spec, &mut r);
        let y = conv2d_dilated(&xc, &spec, &wts).unwrap();
        let per = 25;
        for c in 0..2 {
            let base = &y.data()[c * 3 * per..c * 3 * per + per];
            for t in 1..3 {
                assert_eq!(base, &y.data()[(c * 3 + t) * per..(c * 3 + t + 1) * per]);
            }
        }
    }

    #[test]
    fn temporal_examples() {
        let spec = ConvSpec::temporal(1, 1, 3, 1).with_bias(false);
        let mut delta = ConvWeights::zeros(&spec);
        delta.w.set(&[0, 0, 1, 0, 0], 1.0);
        let mut r = rng(4);
        let x = random(vec![1, 5, 2, 2], &mut r);
        assert_eq!(conv1d_temporal(&x, &spec, &delta).unwrap(), x);

        let v = 1.75;
        let xc = Tensor::full(vec![1, 5, 2, 2], v);
        let ones = ConvWeights {
            w: Tensor::full(spec.weight_shape().to_vec(), 1.0),
            b: None,
        };
        let y = conv1d_temporal(&xc, &spec, &ones).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1]), 2.0 * v);
        assert_eq!(y.get(&[0, 2, 1, 1]), 3.0 * v);
        assert_eq!(y.get(&[0, 4, 0, 0]), 2.0 * v);

        let x7 = random(vec![2, 7, 3, 3], &mut r);
        let s2 = ConvSpec::temporal(2, 2, 3, 2);
        let w2 = random_weights(&s2, &mut r);
        let y = conv1d_temporal(&x7, &s2, &w2).unwrap();
        assert!(max_diff(&y, &naive(&x7, &s2, &w2)) < 1e-12);
    }

    #[test]
    fn wrong_kernel_kind_and_channels_rejected() {
        let x = Tensor::zeros(vec![2, 3, 4, 4]);
        let s = ConvSpec::full3d(2, 1, 3, 1);
        assert!(conv2d_dilated(&x, &s, &ConvWeights::zeros(&s)).is_err());
        let s = ConvSpec::spatial(3, 1, 3, 1);
        assert!(conv2d_dilated(&x, &s, &ConvWeights::zeros(&s)).is_err());
        let s = ConvSpec::spatial(2, 1, 2, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn gemm_matches_direct() {
        let mut r = rng(5);
        for (kind, spec) in [
            (ConvKind::Full3d, ConvSpec::full3d(3, 2, 3, 2)),
            (ConvKind::Spatial2d, ConvSpec::spatial(3, 4, 3, 3)),
            (ConvKind::Temporal1d, ConvSpec::temporal(3, 2, 3, 2)),
            (ConvKind::Spatial2d, ConvSpec::pointwise(3, 5)),
        ] {
            let x = random(vec![3, 4, 5, 6], &mut r);
            let wts = random_weights(&spec, &mut r);
            let a = conv_forward(kind, &x, &spec, &wts, ConvAlgo::Direct).unwrap();
            let b = conv_forward(kind, &x, &spec, &wts, ConvAlgo::Gemm).unwrap();
            assert!(max_diff(&a, &b) < 1e-12, "{kind:?}");
            let up = random(a.shape().to_vec(), &mut r);
            let ga = conv_backward_with(kind, &x, &spec, &wts, &up, ConvAlgo::Direct).unwrap();
            let gb = conv_backward_with(kind, &x, &spec, &wts, &up, ConvAlgo::Gemm).unwrap();
            assert!(max_diff(&ga.x, &gb.x) < 1e-12);
            assert!(max_diff(&ga.w, &gb.w) < 1e-12);
            assert!(max_diff(ga.b.as_ref().unwrap(), gb.b.as_ref().unwrap()) < 1e-12);
        }
    }

    #[test]
    fn delta_kernel_backward_is_ones() {
        let spec = ConvSpec::spatial(1, 1, 3, 2).with_bias(false);
        let mut wts = ConvWeights::zeros(&spec);
        wts.w.set(&[0, 0, 0, 1, 1], 1.0);
        let x = Tensor::full(vec![1, 2, 4, 4], 0.3);
        let up = Tensor::full(vec![1, 2, 4, 4], 1.0);
        let g = conv_backward(ConvKind::Spatial2d, &x, &spec, &wts, &up).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weight_grad_of_ones_input_is_tap_count_map() {
        // dL/dw(tap) for L = sum(y) and x = 1 equals the number of output
        // positions whose tap lands inside the volume.
        let spec = ConvSpec::spatial(1, 1, 3, 1).with_bias(false);
        let wts = ConvWeights::zeros(&spec);
        let x = Tensor::full(vec![1, 1, 5, 5], 1.0);
        let up = Tensor::full(vec![1, 1, 5, 5], 1.0);
        let g = conv_backward(ConvKind::Spatial2d, &x, &spec, &wts, &up).unwrap();
        let expected = [16.0, 20.0, 16.0, 20.0, 25.0, 20.0, 16.0, 20.0, 16.0];
        assert_eq!(g.w.data(), &expected);
    }

    fn check_grad(kind: ConvKind, spec: ConvSpec, shape: Vec<usize>, algo: ConvAlgo, seed: u64) {
        let mut r = rng(seed);
        let x = random(shape, &mut r);
        let wts = random_weights(&spec, &mut r);
        let probe = {
            let y = conv_forward(kind, &x, &spec, &wts, algo).unwrap();
            random(y.shape().to_vec(), &mut r)
        };
        let loss = |y: &Tensor| y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let rx = gradcheck(
            |x| {
                let y = conv_forward(kind, x, &spec, &wts, algo)?;
                let g = conv_backward_with(kind, x, &spec, &wts, &probe, algo)?;
                Ok((loss(&y), g.x))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rx.pass, "{kind:?} input {rx:?}");
        let rw = gradcheck(
            |w| {
                let wt = ConvWeights { w: w.clone(), b: wts.b.clone() };
                let y = conv_forward(kind, &x, &spec, &wt, algo)?;
                let g = conv_backward_with(kind, &x, &spec, &wt, &probe, algo)?;
                Ok((loss(&y), g.w))
            },
            &wts.w,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rw.pass, "{kind:?} weights {rw:?}");
    }

    #[test]
    fn backward_passes_gradcheck() {
        for algo in [ConvAlgo::Direct, ConvAlgo::Gemm] {
            check_grad(ConvKind::Full3d, ConvSpec::full3d(2, 2, 3, 2), vec![2, 3, 4, 4], algo, 10);
            check_grad(ConvKind::Spatial2d, ConvSpec::spatial(2, 3, 3, 2), vec![2, 2, 5, 5], algo, 11);
            check_grad(ConvKind::Temporal1d, ConvSpec::temporal(2, 2, 3, 2), vec![2, 5, 2, 3], algo, 12);
        }
    }

    #[test]
    fn impulse_response_hits_exactly_the_taps() {
        let spec = ConvSpec::full3d(1, 1, 3, 2).with_bias(false);
        let wts = ConvWeights {
            w: Tensor::full(spec.weight_shape().to_vec(), 1.0),
            b: None,
        };
        let mut x = Tensor::zeros(vec![1, 7, 9, 9]);
        x.set(&[0, 3, 4, 4], 1.0);
        let y = conv3d_dilated(&x, &spec, &wts).unwrap();
        let mut got = std::collections::BTreeSet::new();
        for s in 0..7 {
            for i in 0..9 {
                for j in 0..9 {
                    if y.get(&[0, s, i, j]) != 0.0 {
                        got.insert((s as isize - 3, i as isize - 4, j as isize - 4));
                    }
                }
            }
        }
        let mut want = std::collections::BTreeSet::new();
        for l in -1..=1 {
            for m in -1..=1 {
                for n in -1..=1 {
                    want.insert((2 * l, 2 * m, 2 * n));
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn rank_one_kernel_factorizes() {
        let mut r = rng(7);
        let x = random(vec![1, 5, 6, 6], &mut r);
        for dil in [1, 2] {
            let u: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
            let v = random(vec![3, 3], &mut r);
            let s2 = ConvSpec::spatial(1, 1, 3, dil).with_bias(false);
            let s1 = ConvSpec::temporal(1, 1, 3, dil).with_bias(false);
            let s3 = ConvSpec::full3d(1, 1, 3, dil).with_bias(false);
            let w2 = ConvWeights { w: v.reshape(s2.weight_shape().to_vec()).unwrap(), b: None };
            let w1 = ConvWeights { w: Tensor::new(s1.weight_shape().to_vec(), u.clone()).unwrap(), b: None };
            let w3 = ConvWeights {
                w: Tensor::from_fn(s3.weight_shape().to_vec(), |k| u[k / 9] * v.data()[k % 9]),
                b: None,
            };
            let two = conv1d_temporal(&conv2d_dilated(&x, &s2, &w2).unwrap(), &s1, &w1).unwrap();
            let full = conv3d_dilated(&x, &s3, &w3).unwrap();
            assert!(max_diff(&two, &full) < 1e-10);
        }
    }

    #[test]
    fn decomposition_counts() {
        let c = decomposition_param_count(3, 3, 3, 1, 1, false);
        assert_eq!((c.full3d, c.decomposed), (27, 12));
        let c = decomposition_param_count(3, 3, 3, 512, 512, false);
        assert_eq!(c.full3d, 512 * 512 * 27);
        assert_eq!(c.decomposed, 512 * 512 * 12);
        assert_eq!(c.ratio, 12.0 / 27.0);
        for nt in 2..8 {
            for ns in 2..8 {
                for c in [1, 3, 64, 512] {
                    for bias in [false, true] {
                        let r = decomposition_param_count(nt, ns, ns, c, c, bias);
                        assert!(r.ratio < 1.0, "{nt} {ns} {c} {bias}");
                    }
                }
            }
        }
        // The temporal stage is c_out x c_out, so widening layers do not shrink.
        assert!(decomposition_param_count(3, 3, 3, 1, 512, false).ratio > 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn linear_without_bias(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut r = rng(seed);
            let spec = ConvSpec::full3d(2, 2, 3, 1 + (seed % 3) as usize).with_bias(false);
            let wts = random_weights(&spec, &mut r);
            let x = random(vec![2, 3, 4, 4], &mut r);
            let y = random(vec![2, 3, 4, 4], &mut r);
            let mix = Tensor::from_fn(vec![2, 3, 4, 4], |i| a * x.data()[i] + b * y.data()[i]);
            let lhs = conv3d_dilated(&mix, &spec, &wts).unwrap();
            let cx = conv3d_dilated(&x, &spec, &wts).unwrap();
            let cy = conv3d_dilated(&y, &spec, &wts).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-12);
            }
        }
    }
}

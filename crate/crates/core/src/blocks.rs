//! Dense dilated blocks and the spatiotemporal block built from them, plus
//! the resampling layers used around them (max pooling, temporal mean,
//! bilinear upsampling).
//!
//! A dense block keeps a running channel stack. For each dilation rate a
//! pointwise conv squeezes the stack to `bottleneck_channels`, a dilated conv
//! (3×3 spatial for the spatial block, 3×1×1 temporal for the temporal one)
//! emits `growth_channels`, and that output is appended to the stack. A final
//! pointwise conv fuses the stack to `fuse_to` channels. Every conv is
//! followed by ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, AttentionParams, Pooling};
use crate::conv::{conv_backward_with, conv_forward, ConvAlgo, ConvKind, ConvSpec, ConvWeights};
use crate::error::{invalid, Error, Result};
use crate::tensor::{relu_mask_in_place, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub growth_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub fuse_to: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(invalid!("dilation rates must be nonempty and positive"));
        }
        if self.in_channels == 0
            || self.bottleneck_channels == 0
            || self.growth_channels == 0
            || self.fuse_to == 0
        {
            return Err(invalid!("block widths must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Width of the running stack before the `i`-th reduce conv.
    pub fn stack_width(&self, i: usize) -> usize {
        self.in_channels + i * self.growth_channels
    }

    pub fn fused_input_width(&self) -> usize {
        self.stack_width(self.dilation_rates.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Spatial,
    Temporal,
}

impl BlockKind {
    fn conv_kind(self) -> ConvKind {
        match self {
            BlockKind::Spatial => ConvKind::Spatial2d,
            BlockKind::Temporal => ConvKind::Temporal1d,
        }
    }

    fn pooling(self) -> Pooling {
        match self {
            BlockKind::Spatial => Pooling::PerFrame,
            BlockKind::Temporal => Pooling::Spatiotemporal,
        }
    }
}

/// Every conv of a block, in execution-independent order: reduces, then
/// dilated convs, then the fuse.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpecs {
    pub reduce: Vec<ConvSpec>,
    pub dilated: Vec<ConvSpec>,
    pub fuse: ConvSpec,
}

pub fn block_specs(kind: BlockKind, cfg: &BlockConfig) -> BlockSpecs {
    let reduce = (0..cfg.dilation_rates.len())
        .map(|i| ConvSpec::pointwise(cfg.stack_width(i), cfg.bottleneck_channels))
        .collect();
    let dilated = cfg
        .dilation_rates
        .iter()
        .map(|&r| match kind {
            BlockKind::Spatial => ConvSpec::spatial(cfg.bottleneck_channels, cfg.growth_channels, 3, r),
            BlockKind::Temporal => ConvSpec::temporal(cfg.bottleneck_channels, cfg.growth_channels, 3, r),
        })
        .collect();
    BlockSpecs {
        reduce,
        dilated,
        fuse: ConvSpec::pointwise(cfg.fused_input_width(), cfg.fuse_to),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlockParams {
    pub reduce: Vec<ConvWeights>,
    pub dilated: Vec<ConvWeights>,
    pub fuse: ConvWeights,
}

impl DenseBlockParams {
    pub fn init<R: Rng + ?Sized>(kind: BlockKind, cfg: &BlockConfig, rng: &mut R) -> Self {
        let s = block_specs(kind, cfg);
        Self {
            reduce: s.reduce.iter().map(|sp| ConvWeights::kaiming(sp, rng)).collect(),
            dilated: s.dilated.iter().map(|sp| ConvWeights::kaiming(sp, rng)).collect(),
            fuse: ConvWeights::kaiming(&s.fuse, rng),
        }
    }

    pub fn zeros(kind: BlockKind, cfg: &BlockConfig) -> Self {
        let s = block_specs(kind, cfg);
        Self {
            reduce: s.reduce.iter().map(ConvWeights::zeros).collect(),
            dilated: s.dilated.iter().map(ConvWeights::zeros).collect(),
            fuse: ConvWeights::zeros(&s.fuse),
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvWeights> {
        self.reduce.iter().chain(&self.dilated).chain(std::iter::once(&self.fuse))
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvWeights> {
        self.reduce
            .iter_mut()
            .chain(self.dilated.iter_mut())
            .chain(std::iter::once(&mut self.fuse))
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DenseBlockCache {
    /// Final running stack; the input to reduce `i` is its first
    /// `stack_width(i)` channels.
    stack: Tensor,
    /// Post-ReLU bottleneck outputs.
    reduced: Vec<Tensor>,
    out: Tensor,
}

fn conv_relu(kind: ConvKind, x: &Tensor, spec: &ConvSpec, w: &ConvWeights) -> Result<Tensor> {
    let mut y = conv_forward(kind, x, spec, w, ConvAlgo::Gemm)?;
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(y)
}

fn check_input(cfg: &BlockConfig, x: &Tensor) -> Result<()> {
    cfg.validate()?;
    if x.rank() != 4 || x.shape()[0] != cfg.in_channels {
        return Err(Error::shape("dense block input", x.shape(), &[cfg.in_channels]));
    }
    Ok(())
}

pub fn dense_block_forward(
    kind: BlockKind,
    x: &Tensor,
    cfg: &BlockConfig,
    params: &DenseBlockParams,
) -> Result<(Tensor, DenseBlockCache)> {
    check_input(cfg, x)?;
    let specs = block_specs(kind, cfg);
    let mut stack = x.clone();
    let mut reduced = Vec::with_capacity(specs.reduce.len());
    for i in 0..specs.reduce.len() {
        let r = conv_relu(ConvKind::Spatial2d, &stack, &specs.reduce[i], &params.reduce[i])?;
        let grown = conv_relu(kind.conv_kind(), &r, &specs.dilated[i], &params.dilated[i])?;
        stack = Tensor::concat0(&[&stack, &grown])?;
        reduced.push(r);
    }
    let out = conv_relu(ConvKind::Spatial2d, &stack, &specs.fuse, &params.fuse)?;
    Ok((
        out.clone(),
        DenseBlockCache {
            stack,
            reduced,
            out,
        },
    ))
}

pub fn dense_block_backward(
    kind: BlockKind,
    cfg: &BlockConfig,
    params: &DenseBlockParams,
    cache: &DenseBlockCache,
    upstream: &Tensor,
) -> Result<(Tensor, DenseBlockParams)> {
    cache.out.check_same("dense block upstream", upstream)?;
    let specs = block_specs(kind, cfg);
    let mut grads = DenseBlockParams::zeros(kind, cfg);
    let inner = cache.stack.len() / cache.stack.shape()[0];

    let mut g = upstream.clone();
    relu_mask_in_place(cache.out.data(), g.data_mut());
    let fg = conv_backward_with(ConvKind::Spatial2d, &cache.stack, &specs.fuse, &params.fuse, &g, ConvAlgo::Gemm)?;
    grads.fuse = ConvWeights { w: fg.w, b: fg.b };
    let mut g_stack = fg.x;

    for i in (0..specs.reduce.len()).rev() {
        let lo = cfg.stack_width(i);
        let hi = lo + cfg.growth_channels;
        let grown = cache.stack.slice0(lo, hi)?;
        let mut g_grown = g_stack.slice0(lo, hi)?;
        relu_mask_in_place(grown.data(), g_grown.data_mut());
        let dg = conv_backward_with(
            kind.conv_kind(),
            &cache.reduced[i],
            &specs.dilated[i],
            &params.dilated[i],
            &g_grown,
            ConvAlgo::Gemm,
        )?;
        grads.dilated[i] = ConvWeights { w: dg.w, b: dg.b };

        let mut g_red = dg.x;
        relu_mask_in_place(cache.reduced[i].data(), g_red.data_mut());
        let prefix = cache.stack.slice0(0, lo)?;
        let rg = conv_backward_with(
            ConvKind::Spatial2d,
            &prefix,
            &specs.reduce[i],
            &params.reduce[i],
            &g_red,
            ConvAlgo::Gemm,
        )?;
        grads.reduce[i] = ConvWeights { w: rg.w, b: rg.b };
        for (a, b) in g_stack.data_mut()[..lo * inner].iter_mut().zip(rg.x.data()) {
            *a += b;
        }
    }
    Ok((g_stack.slice0(0, cfg.in_channels)?, grads))
}

pub fn dsb_forward(x: &Tensor, cfg: &BlockConfig, params: &DenseBlockParams) -> Result<Tensor> {
    Ok(dense_block_forward(BlockKind::Spatial, x, cfg, params)?.0)
}

pub fn dtb_forward(x: &Tensor, cfg: &BlockConfig, params: &DenseBlockParams) -> Result<Tensor> {
    Ok(dense_block_forward(BlockKind::Temporal, x, cfg, params)?.0)
}

/// Spatial block, its attention, temporal block, its attention. A missing
/// attention entry means the gate is bypassed (α ≡ 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DstbParams {
    pub spatial: DenseBlockParams,
    pub spatial_attention: Option<AttentionParams>,
    pub temporal: DenseBlockParams,
    pub temporal_attention: Option<AttentionParams>,
}

impl DstbParams {
    pub fn init<R: Rng + ?Sized>(
        cfg_s: &BlockConfig,
        cfg_t: &BlockConfig,
        attention_reduction: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let mut spatial = DenseBlockParams::init(BlockKind::Spatial, cfg_s, rng);
        let spatial_attention = attention_reduction.map(|r| AttentionParams::random(cfg_s.fuse_to, r, rng));
        let mut temporal = DenseBlockParams::init(BlockKind::Temporal, cfg_t, rng);
        let temporal_attention = attention_reduction.map(|r| AttentionParams::random(cfg_t.fuse_to, r, rng));
        if attention_reduction.is_some() {
            // Gates start near 0.5; doubling the fuse weights that feed them
            // keeps the activation scale of a stack of blocks at init.
            for p in [&mut spatial, &mut temporal] {
                p.fuse.w.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
        }
        Self {
            spatial,
            spatial_attention,
            temporal,
            temporal_attention,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DstbCache {
    spatial: DenseBlockCache,
    /// Spatial block output (attention input).
    spatial_out: Tensor,
    spatial_alpha: Option<Tensor>,
    temporal: DenseBlockCache,
    temporal_out: Tensor,
    temporal_alpha: Option<Tensor>,
}

impl DstbCache {
    pub fn spatial_alpha(&self) -> Option<&Tensor> {
        self.spatial_alpha.as_ref()
    }

    pub fn temporal_alpha(&self) -> Option<&Tensor> {
        self.temporal_alpha.as_ref()
    }
}

fn check_pair(cfg_s: &BlockConfig, cfg_t: &BlockConfig) -> Result<()> {
    if cfg_s.fuse_to != cfg_t.in_channels {
        return Err(invalid!(
            "spatial block emits {} channels but temporal block takes {}",
            cfg_s.fuse_to,
            cfg_t.in_channels
        ));
    }
    Ok(())
}

pub fn dstb_forward_cached(
    x: &Tensor,
    cfg_s: &BlockConfig,
    cfg_t: &BlockConfig,
    params: &DstbParams,
) -> Result<(Tensor, DstbCache)> {
    check_pair(cfg_s, cfg_t)?;
    let (spatial_out, spatial) = dense_block_forward(BlockKind::Spatial, x, cfg_s, &params.spatial)?;
    let (mid, spatial_alpha) = match &params.spatial_attention {
        Some(p) => {
            let (y, a) = attention_forward(&spatial_out, p, Pooling::PerFrame)?;
            (y, Some(a))
        }
        None => (spatial_out.clone(), None),
    };
    let (temporal_out, temporal) = dense_block_forward(BlockKind::Temporal, &mid, cfg_t, &params.temporal)?;
    let (out, temporal_alpha) = match &params.temporal_attention {
        Some(p) => {
            let (y, a) = attention_forward(&temporal_out, p, Pooling::Spatiotemporal)?;
            (y, Some(a))
        }
        None => (temporal_out.clone(), None),
    };
    Ok((
        out,
        DstbCache {
            spatial,
            spatial_out,
            spatial_alpha,
            temporal,
            temporal_out,
            temporal_alpha,
        },
    ))
}

pub fn dstb_forward(
    x: &Tensor,
    cfg_s: &BlockConfig,
    cfg_t: &BlockConfig,
    params: &DstbParams,
) -> Result<Tensor> {
    Ok(dstb_forward_cached(x, cfg_s, cfg_t, params)?.0)
}

pub fn dstb_backward(
    cfg_s: &BlockConfig,
    cfg_t: &BlockConfig,
    params: &DstbParams,
    cache: &DstbCache,
    upstream: &Tensor,
) -> Result<(Tensor, DstbParams)> {
    let (g_t, temporal_attention) = match &params.temporal_attention {
        Some(p) => {
            let (g, gp) = attention_backward(&cache.temporal_out, p, BlockKind::Temporal.pooling(), upstream)?;
            (g, Some(gp))
        }
        None => (upstream.clone(), None),
    };
    let (g_mid, temporal) = dense_block_backward(BlockKind::Temporal, cfg_t, &params.temporal, &cache.temporal, &g_t)?;
    let (g_s, spatial_attention) = match &params.spatial_attention {
        Some(p) => {
            let (g, gp) = attention_backward(&cache.spatial_out, p, BlockKind::Spatial.pooling(), &g_mid)?;
            (g, Some(gp))
        }
        None => (g_mid, None),
    };
    let (gx, spatial) = dense_block_backward(BlockKind::Spatial, cfg_s, &params.spatial, &cache.spatial, &g_s)?;
    Ok((
        gx,
        DstbParams {
            spatial,
            spatial_attention,
            temporal,
            temporal_attention,
        },
    ))
}

/// Source index pairs and weights for half-pixel-centre bilinear resampling
/// of one axis from `n` to `n * scale` samples.
fn bilinear_taps(n: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..n * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// `[C, H, W] -> [C, scale·H, scale·W]`.
pub fn bilinear_upsample(x: &Tensor, scale: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(x)?;
    if scale == 0 {
        return Err(invalid!("upsample scale must be at least 1"));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let (ty, tx) = (bilinear_taps(h, scale), bilinear_taps(w, scale));
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    let src = x.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oi * ow + oj] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]; `upstream: [C, scale·H, scale·W]`.
pub fn bilinear_upsample_backward(upstream: &Tensor, h: usize, w: usize, scale: usize) -> Result<Tensor> {
    let [c, oh, ow] = dims3(upstream)?;
    if oh != h * scale || ow != w * scale {
        return Err(Error::shape("bilinear backward", upstream.shape(), &[c, h * scale, w * scale]));
    }
    if scale == 1 {
        return Ok(upstream.clone());
    }
    let (ty, tx) = (bilinear_taps(h, scale), bilinear_taps(w, scale));
    let mut gx = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let g = &upstream.data()[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oi * ow + oj];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Ok(gx)
}

fn dims3(x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(invalid!("expected [C, H, W], got {:?}", x.shape())),
    }
}

/// 2×2 max pooling with stride 2 over the last two axes of `[C, D, H, W]`.
/// Returns the pooled volume and the flat argmax index of every output.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[c, d, h, w] = x.shape() else {
        return Err(invalid!("maxpool expects [C, D, H, W], got {:?}", x.shape()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("maxpool needs even H and W, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let n = c * d * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    let src = x.data();
    for plane in 0..c * d {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for k in [base + 2 * i * w + 2 * j + 1, base + (2 * i + 1) * w + 2 * j, base + (2 * i + 1) * w + 2 * j + 1] {
                    if src[k] > src[best] {
                        best = k;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, d, oh, ow], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(invalid!("maxpool backward: {} indices for {} gradients", argmax.len(), upstream.len()));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec());
    for (&k, &g) in argmax.iter().zip(upstream.data()) {
        gx.data_mut()[k] += g;
    }
    Ok(gx)
}

/// `[C, D, H, W] -> [C, H, W]` by unweighted mean over D.
pub fn temporal_mean(x: &Tensor) -> Result<Tensor> {
    let &[c, d, h, w] = x.shape() else {
        return Err(invalid!("temporal_mean expects [C, D, H, W], got {:?}", x.shape()));
    };
    let hw = h * w;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let dst = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
        for s in 0..d {
            let src = &x.data()[(ch * d + s) * hw..(ch * d + s + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        dst.iter_mut().for_each(|v| *v /= d as f64);
    }
    Ok(out)
}

pub fn temporal_mean_backward(upstream: &Tensor, depth: usize) -> Result<Tensor> {
    let [c, h, w] = dims3(upstream)?;
    let hw = h * w;
    let mut gx = Tensor::zeros(vec![c, depth, h, w]);
    for ch in 0..c {
        let src = &upstream.data()[ch * hw..(ch + 1) * hw];
        for s in 0..depth {
            let dst = &mut gx.data_mut()[(ch * depth + s) * hw..(ch * depth + s + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a = b / depth as f64);
        }
    }
    Ok(gx)
}

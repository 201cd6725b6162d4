//! The full counting network: a per-frame VGG-style backbone, a stack of
//! spatiotemporal blocks, a temporal mean, a small 2D head, and bilinear
//! upsampling back to the input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::blocks::{
    bilinear_upsample, bilinear_upsample_backward, block_specs, dstb_backward, dstb_forward_cached, maxpool2,
    maxpool2_backward, temporal_mean, temporal_mean_backward, BlockConfig, BlockKind, DenseBlockParams, DstbCache,
    DstbParams,
};
use crate::conv::{conv_backward_with, conv_forward, decomposition_param_count, ConvAlgo, ConvKind, ConvSpec, ConvWeights};
use crate::density::DensityMap;
use crate::error::{invalid, Result};
use crate::tensor::{relu_mask_in_place, Tensor};

/// RNG stream used for weight initialisation; data order uses its own.
pub const INIT_STREAM: u64 = 1;

const FINAL_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    FullVgg10,
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneLayer {
    Conv(usize),
    Pool,
}

impl Backbone {
    pub fn layers(self) -> Vec<BackboneLayer> {
        use BackboneLayer::{Conv, Pool};
        match self {
            Backbone::FullVgg10 => vec![
                Conv(64),
                Conv(64),
                Pool,
                Conv(128),
                Conv(128),
                Pool,
                Conv(256),
                Conv(256),
                Conv(256),
                Pool,
                Conv(512),
                Conv(512),
                Conv(512),
            ],
            Backbone::Tiny => vec![Conv(8), Conv(8), Pool, Conv(16), Conv(16), Pool],
        }
    }

    pub fn downsample(self) -> usize {
        1 << self.layers().iter().filter(|l| **l == BackboneLayer::Pool).count()
    }

    pub fn out_channels(self) -> usize {
        self.layers()
            .iter()
            .rev()
            .find_map(|l| match l {
                BackboneLayer::Conv(c) => Some(*c),
                BackboneLayer::Pool => None,
            })
            .expect("backbone has a conv layer")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub image_channels: usize,
    /// Frames per clip.
    pub depth: usize,
    pub dstb_count: usize,
    pub spatial_block: BlockConfig,
    pub temporal_block: BlockConfig,
    pub attention_reduction: usize,
    /// `false` bypasses every channel gate (α ≡ 1).
    pub attention: bool,
    pub head_channels: Vec<usize>,
    pub upsample_scale: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn full() -> Self {
        let block = BlockConfig {
            in_channels: 512,
            bottleneck_channels: 256,
            growth_channels: 64,
            dilation_rates: vec![1, 2, 3],
            fuse_to: 512,
        };
        Self {
            backbone: Backbone::FullVgg10,
            image_channels: 3,
            depth: 10,
            dstb_count: 4,
            spatial_block: block.clone(),
            temporal_block: block,
            attention_reduction: 16,
            attention: true,
            head_channels: vec![256, 128],
            upsample_scale: 8,
            seed: 0,
        }
    }

    pub fn tiny() -> Self {
        let block = BlockConfig {
            in_channels: 16,
            bottleneck_channels: 8,
            growth_channels: 8,
            dilation_rates: vec![1, 2, 3],
            fuse_to: 16,
        };
        Self {
            backbone: Backbone::Tiny,
            image_channels: 1,
            depth: 10,
            dstb_count: 4,
            spatial_block: block.clone(),
            temporal_block: block,
            attention_reduction: 4,
            attention: true,
            head_channels: vec![16, 8],
            upsample_scale: 4,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" | "full_vgg10" => Some(Self::full()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dstb_count == 0 || self.image_channels == 0 {
            return Err(invalid!("depth, dstb_count and image_channels must be positive"));
        }
        self.spatial_block.validate()?;
        self.temporal_block.validate()?;
        let bb = self.backbone.out_channels();
        if self.spatial_block.in_channels != bb {
            return Err(invalid!("spatial block takes {} channels but the backbone emits {bb}", self.spatial_block.in_channels));
        }
        if self.spatial_block.fuse_to != self.temporal_block.in_channels {
            return Err(invalid!("spatial block emits {} channels but temporal block takes {}", self.spatial_block.fuse_to, self.temporal_block.in_channels));
        }
        if self.dstb_count > 1 && self.temporal_block.fuse_to != self.spatial_block.in_channels {
            return Err(invalid!(
                "stacked blocks need temporal output {} to equal spatial input {}",
                self.temporal_block.fuse_to,
                self.spatial_block.in_channels
            ));
        }
        if self.head_channels.len() != 2 || self.head_channels.contains(&0) {
            return Err(invalid!("head needs two positive widths, got {:?}", self.head_channels));
        }
        if self.attention_reduction == 0 {
            return Err(invalid!("attention reduction must be positive"));
        }
        if self.upsample_scale != self.backbone.downsample() {
            return Err(invalid!(
                "upsample scale {} must undo the backbone's {}x downsampling",
                self.upsample_scale,
                self.backbone.downsample()
            ));
        }
        Ok(())
    }

    fn backbone_specs(&self) -> Vec<Option<ConvSpec>> {
        let mut c = self.image_channels;
        self.backbone
            .layers()
            .into_iter()
            .map(|l| match l {
                BackboneLayer::Conv(out) => {
                    let s = ConvSpec::spatial(c, out, 3, 1);
                    c = out;
                    Some(s)
                }
                BackboneLayer::Pool => None,
            })
            .collect()
    }

    fn head_specs(&self) -> [ConvSpec; 3] {
        let [a, b] = [self.head_channels[0], self.head_channels[1]];
        [
            ConvSpec::spatial(self.temporal_block.fuse_to, a, 3, 1),
            ConvSpec::spatial(a, b, 3, 1),
            ConvSpec::pointwise(b, 1),
        ]
    }

    fn attention_reduction(&self) -> Option<usize> {
        self.attention.then_some(self.attention_reduction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<ConvWeights>,
    pub dstbs: Vec<DstbParams>,
    pub head: Vec<ConvWeights>,
}

fn conv_names<'a>(prefix: &str, w: &'a ConvWeights, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.weight"), &w.w));
    if let Some(b) = &w.b {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn conv_refs_mut<'a>(w: &'a mut ConvWeights, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut w.w);
    if let Some(b) = &mut w.b {
        out.push(b);
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        Ok(Self::init_with(cfg, &mut rng))
    }

    fn init_with<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let backbone = cfg.backbone_specs().iter().flatten().map(|s| ConvWeights::kaiming(s, rng)).collect();
        let dstbs = (0..cfg.dstb_count)
            .map(|_| DstbParams::init(&cfg.spatial_block, &cfg.temporal_block, cfg.attention_reduction(), rng))
            .collect();
        let mut head: Vec<ConvWeights> = cfg.head_specs().iter().map(|s| ConvWeights::kaiming(s, rng)).collect();
        // The output is clamped at zero, so a final layer that starts negative
        // everywhere never receives a gradient. Its inputs are post-ReLU, so
        // small nonnegative weights keep every output pixel live at step 0.
        let last = head.last_mut().expect("three head convs");
        last.w.data_mut().iter_mut().for_each(|v| *v = FINAL_INIT_SCALE * v.abs());
        Self { backbone, dstbs, head }
    }

    /// Same layout as [`ModelParams::init`] with every entry zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let block = |kind, c: &BlockConfig| DenseBlockParams::zeros(kind, c);
        let att = |c: usize| cfg.attention_reduction().map(|r| AttentionParams::zeros(c, r));
        Ok(Self {
            backbone: cfg.backbone_specs().iter().flatten().map(ConvWeights::zeros).collect(),
            dstbs: (0..cfg.dstb_count)
                .map(|_| DstbParams {
                    spatial: block(BlockKind::Spatial, &cfg.spatial_block),
                    spatial_attention: att(cfg.spatial_block.fuse_to),
                    temporal: block(BlockKind::Temporal, &cfg.temporal_block),
                    temporal_attention: att(cfg.temporal_block.fuse_to),
                })
                .collect(),
            head: cfg.head_specs().iter().map(ConvWeights::zeros).collect(),
        })
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, w) in self.backbone.iter().enumerate() {
            conv_names(&format!("backbone.conv{i}"), w, &mut out);
        }
        for (k, d) in self.dstbs.iter().enumerate() {
            for (tag, block, att) in [
                ("dsb", &d.spatial, &d.spatial_attention),
                ("dtb", &d.temporal, &d.temporal_attention),
            ] {
                for (i, w) in block.reduce.iter().enumerate() {
                    conv_names(&format!("dstb{k}.{tag}.reduce{i}"), w, &mut out);
                }
                for (i, w) in block.dilated.iter().enumerate() {
                    conv_names(&format!("dstb{k}.{tag}.dilated{i}"), w, &mut out);
                }
                conv_names(&format!("dstb{k}.{tag}.fuse"), &block.fuse, &mut out);
                if let Some(a) = att {
                    out.push((format!("dstb{k}.{tag}.attention.w1"), &a.w1));
                    out.push((format!("dstb{k}.{tag}.attention.w2"), &a.w2));
                }
            }
        }
        for (i, w) in self.head.iter().enumerate() {
            conv_names(&format!("head.conv{i}"), w, &mut out);
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for w in &mut self.backbone {
            conv_refs_mut(w, &mut out);
        }
        for d in &mut self.dstbs {
            for (block, att) in [
                (&mut d.spatial, &mut d.spatial_attention),
                (&mut d.temporal, &mut d.temporal_attention),
            ] {
                for w in block.convs_mut() {
                    conv_refs_mut(w, &mut out);
                }
                if let Some(a) = att {
                    out.push(&mut a.w1);
                    out.push(&mut a.w2);
                }
            }
        }
        for w in &mut self.head {
            conv_refs_mut(w, &mut out);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Sum of all parameter element counts, recomputed on every call.
    pub fn total_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to every backbone layer, then the backbone output.
    backbone_acts: Vec<Tensor>,
    pool_argmax: Vec<Vec<usize>>,
    /// Input to every DSTB, then the last DSTB's output.
    dstb_inputs: Vec<Tensor>,
    dstb_caches: Vec<DstbCache>,
    /// Input to every head conv, then the final 1×1 output before the clamp.
    head_acts: Vec<Tensor>,
    pub output: Tensor,
}

impl ForwardTrace {
    /// Per block: the spatial gates `[D, C]` and the temporal gates `[C]`.
    pub fn attention_weights(&self) -> Vec<(Option<&Tensor>, Option<&Tensor>)> {
        self.dstb_caches.iter().map(|c| (c.spatial_alpha(), c.temporal_alpha())).collect()
    }

    pub fn pre_clamp(&self) -> &Tensor {
        self.head_acts.last().expect("head ran")
    }
}

/// `[T, C_img, H, W] -> [C_img, T, H, W]`.
fn to_channel_major(clip: &Tensor) -> Result<Tensor> {
    let &[t, c, h, w] = clip.shape() else {
        return Err(invalid!("clip must be [T, C, H, W], got {:?}", clip.shape()));
    };
    let hw = h * w;
    let mut out = Tensor::zeros(vec![c, t, h, w]);
    for s in 0..t {
        for ch in 0..c {
            out.data_mut()[(ch * t + s) * hw..(ch * t + s + 1) * hw]
                .copy_from_slice(&clip.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
        }
    }
    Ok(out)
}

fn conv_relu(kind: ConvKind, x: &Tensor, spec: &ConvSpec, w: &ConvWeights) -> Result<Tensor> {
    let mut y = conv_forward(kind, x, spec, w, ConvAlgo::Gemm)?;
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(y)
}

pub fn check_clip(clip: &Tensor, cfg: &ModelConfig) -> Result<()> {
    let &[t, c, h, w] = clip.shape() else {
        return Err(invalid!("clip must be [T, C, H, W], got {:?}", clip.shape()));
    };
    if t != cfg.depth {
        return Err(invalid!("clip has {t} frames but the model expects {}", cfg.depth));
    }
    if c != cfg.image_channels {
        return Err(invalid!("clip has {c} channels but the model expects {}", cfg.image_channels));
    }
    let f = cfg.backbone.downsample();
    if h % f != 0 || w % f != 0 {
        return Err(invalid!("frame size {h}x{w} is not divisible by {f}"));
    }
    Ok(())
}

/// Runs the network on one clip and keeps the intermediates for
/// [`backward`]. The output is the `[H, W]` density of the clip's last frame.
pub fn forward_traced(clip: &Tensor, cfg: &ModelConfig, params: &ModelParams) -> Result<ForwardTrace> {
    cfg.validate()?;
    check_clip(clip, cfg)?;
    let mut x = to_channel_major(clip)?;
    let mut backbone_acts = Vec::new();
    let mut pool_argmax = Vec::new();
    let mut convs = params.backbone.iter();
    for spec in cfg.backbone_specs() {
        let y = match spec {
            Some(s) => {
                let w = convs.next().ok_or_else(|| invalid!("missing backbone weights"))?;
                conv_relu(ConvKind::Spatial2d, &x, &s, w)?
            }
            None => {
                let (y, arg) = maxpool2(&x)?;
                pool_argmax.push(arg);
                y
            }
        };
        backbone_acts.push(std::mem::replace(&mut x, y));
    }
    backbone_acts.push(x.clone());

    let mut dstb_inputs = Vec::with_capacity(cfg.dstb_count + 1);
    let mut dstb_caches = Vec::with_capacity(cfg.dstb_count);
    for p in &params.dstbs {
        let (y, cache) = dstb_forward_cached(&x, &cfg.spatial_block, &cfg.temporal_block, p)?;
        dstb_inputs.push(std::mem::replace(&mut x, y));
        dstb_caches.push(cache);
    }
    dstb_inputs.push(x.clone());

    let mut h = temporal_mean(&x)?;
    let specs = cfg.head_specs();
    let mut head_acts = Vec::with_capacity(4);
    for (i, (s, w)) in specs.iter().zip(&params.head).enumerate() {
        let y = if i < 2 {
            conv_relu(ConvKind::Spatial2d, &h, s, w)?
        } else {
            conv_forward(ConvKind::Spatial2d, &h, s, w, ConvAlgo::Gemm)?
        };
        head_acts.push(std::mem::replace(&mut h, y));
    }
    head_acts.push(h.clone());

    let clamped = h.map(|v| v.max(0.0));
    let up = bilinear_upsample(&clamped, cfg.upsample_scale)?;
    let shape = up.shape()[1..].to_vec();
    Ok(ForwardTrace {
        backbone_acts,
        pool_argmax,
        dstb_inputs,
        dstb_caches,
        head_acts,
        output: up.into_shape(shape)?,
    })
}

pub fn forward(clip: &Tensor, cfg: &ModelConfig, params: &ModelParams) -> Result<Tensor> {
    Ok(forward_traced(clip, cfg, params)?.output)
}

pub fn predict(clip: &Tensor, cfg: &ModelConfig, params: &ModelParams) -> Result<DensityMap> {
    DensityMap::new(forward(clip, cfg, params)?)
}

/// Gradients of every parameter given `dL/d output` (`[H, W]`).
pub fn backward(cfg: &ModelConfig, params: &ModelParams, trace: &ForwardTrace, upstream: &Tensor) -> Result<ModelParams> {
    trace.output.check_same("model upstream", upstream)?;
    let mut grads = ModelParams::zeros(cfg)?;

    let pre = trace.pre_clamp();
    let [_, fh, fw] = [pre.shape()[0], pre.shape()[1], pre.shape()[2]];
    let up = upstream.reshape(vec![1, upstream.shape()[0], upstream.shape()[1]])?;
    let mut g = bilinear_upsample_backward(&up, fh, fw, cfg.upsample_scale)?;
    relu_mask_in_place(pre.data(), g.data_mut());

    let specs = cfg.head_specs();
    for i in (0..3).rev() {
        if i < 2 {
            relu_mask_in_place(trace.head_acts[i + 1].data(), g.data_mut());
        }
        let cg = conv_backward_with(ConvKind::Spatial2d, &trace.head_acts[i], &specs[i], &params.head[i], &g, ConvAlgo::Gemm)?;
        grads.head[i] = ConvWeights { w: cg.w, b: cg.b };
        g = cg.x;
    }

    let depth = trace.dstb_inputs.last().expect("dstb output").shape()[1];
    g = temporal_mean_backward(&g, depth)?;
    for k in (0..params.dstbs.len()).rev() {
        let (gx, gp) = dstb_backward(&cfg.spatial_block, &cfg.temporal_block, &params.dstbs[k], &trace.dstb_caches[k], &g)?;
        grads.dstbs[k] = gp;
        g = gx;
    }

    let bspecs = cfg.backbone_specs();
    let mut conv_idx = params.backbone.len();
    let mut pool_idx = trace.pool_argmax.len();
    for (li, spec) in bspecs.iter().enumerate().rev() {
        let input = &trace.backbone_acts[li];
        match spec {
            Some(s) => {
                conv_idx -= 1;
                relu_mask_in_place(trace.backbone_acts[li + 1].data(), g.data_mut());
                let cg = conv_backward_with(ConvKind::Spatial2d, input, s, &params.backbone[conv_idx], &g, ConvAlgo::Gemm)?;
                grads.backbone[conv_idx] = ConvWeights { w: cg.w, b: cg.b };
                g = cg.x;
            }
            None => {
                pool_idx -= 1;
                g = maxpool2_backward(input.shape(), &trace.pool_argmax[pool_idx], &g)?;
            }
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// One dilated temporal stage against a full 3D conv.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRatio {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Weights of the stage's spatial and temporal factors at equal in/out
    /// width versus one `n×n×n` kernel of that width.
    pub full3d: u64,
    pub decomposed: u64,
    pub ratio: f64,
    /// The same comparison at the stage's actual widths.
    pub actual_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub layers: Vec<LayerCount>,
    pub stages: Vec<StageRatio>,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    let params = ModelParams::zeros(cfg)?;
    let layers: Vec<LayerCount> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| LayerCount {
            name,
            shape: t.shape().to_vec(),
            count: t.len(),
        })
        .collect();
    let total = layers.iter().map(|l| l.count).sum();
    let specs = block_specs(BlockKind::Temporal, &cfg.temporal_block);
    let mut stages = Vec::new();
    for k in 0..cfg.dstb_count {
        for (i, s) in specs.dilated.iter().enumerate() {
            let n = s.kernel[0];
            let eq = decomposition_param_count(n, n, n, s.out_channels, s.out_channels, false);
            let actual = decomposition_param_count(n, n, n, s.in_channels, s.out_channels, false);
            stages.push(StageRatio {
                name: format!("dstb{k}.dtb.dilated{i}"),
                in_channels: s.in_channels,
                out_channels: s.out_channels,
                full3d: eq.full3d,
                decomposed: eq.decomposed,
                ratio: eq.ratio,
                actual_ratio: actual.ratio,
            });
        }
    }
    Ok(ParamReport { total, layers, stages })
}

/// A seeded probe of `n` parameter coordinates as `(tensor index, element)`.
pub fn probe_coords(params: &ModelParams, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n.min(total) {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        if !picked.contains(&(ti, flat)) {
            picked.push((ti, flat));
        }
    }
    picked
}

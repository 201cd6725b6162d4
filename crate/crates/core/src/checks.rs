//! Named finite-difference checks over every differentiable component, run
//! on small seeded problems. Each layer check contracts the output with a
//! fixed random probe so gradients are O(1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, AttentionParams, Pooling};
use crate::blocks::{
    dense_block_backward, dense_block_forward, dstb_backward, dstb_forward_cached, BlockConfig, BlockKind,
    DenseBlockParams, DstbParams,
};
use crate::conv::{conv_backward_with, conv_forward, ConvAlgo, ConvKind, ConvSpec, ConvWeights};
use crate::error::{invalid, Result};
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::loss::{pixelwise_l2, prl, PrlConfig};
use crate::model::{backward, forward_traced, probe_coords, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub const OPS: [&str; 11] = [
    "conv1d",
    "conv2d",
    "conv3d",
    "dsb",
    "dtb",
    "dstb",
    "attention",
    "attention_per_frame",
    "pixelwise_l2",
    "prl",
    "model",
];

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Keeps the worse of two reports.
fn worse(a: GradcheckReport, b: GradcheckReport) -> GradcheckReport {
    let pass = a.pass && b.pass;
    let checked = a.checked + b.checked;
    let mut w = if b.max_rel_err > a.max_rel_err { b } else { a };
    w.pass = pass;
    w.checked = checked;
    w
}

fn conv_check(kind: ConvKind, spec: ConvSpec, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(vec![spec.in_channels, 4, 5, 5], &mut rng);
    let wts = ConvWeights {
        w: random(spec.weight_shape().to_vec(), &mut rng),
        b: Some(random(vec![spec.out_channels], &mut rng)),
    };
    let probe = random(vec![spec.out_channels, 4, 5, 5], &mut rng);
    let on_x = gradcheck(
        |x| {
            let y = conv_forward(kind, x, &spec, &wts, ConvAlgo::Gemm)?;
            let g = conv_backward_with(kind, x, &spec, &wts, &probe, ConvAlgo::Gemm)?;
            Ok((dot(&y, &probe), g.x))
        },
        &x,
        EPS,
        TOL,
    )?;
    let on_w = gradcheck(
        |w| {
            let ws = ConvWeights {
                w: w.clone(),
                b: wts.b.clone(),
            };
            let y = conv_forward(kind, &x, &spec, &ws, ConvAlgo::Gemm)?;
            let g = conv_backward_with(kind, &x, &spec, &ws, &probe, ConvAlgo::Gemm)?;
            Ok((dot(&y, &probe), g.w))
        },
        &wts.w,
        EPS,
        TOL,
    )?;
    Ok(worse(on_x, on_w))
}

fn block_cfg() -> BlockConfig {
    BlockConfig {
        in_channels: 2,
        bottleneck_channels: 2,
        growth_channels: 2,
        dilation_rates: vec![1, 2, 3],
        fuse_to: 2,
    }
}

fn block_check(kind: BlockKind, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = block_cfg();
    let p = DenseBlockParams::init(kind, &cfg, &mut rng);
    let x = random(vec![2, 4, 6, 6], &mut rng);
    let probe = random(vec![2, 4, 6, 6], &mut rng);
    let on_x = gradcheck(
        |x| {
            let (y, cache) = dense_block_forward(kind, x, &cfg, &p)?;
            let (g, _) = dense_block_backward(kind, &cfg, &p, &cache, &probe)?;
            Ok((dot(&y, &probe), g))
        },
        &x,
        EPS,
        TOL,
    )?;
    let on_w = gradcheck(
        |w| {
            let mut q = p.clone();
            q.dilated[2].w = w.clone();
            let (y, cache) = dense_block_forward(kind, &x, &cfg, &q)?;
            let (_, g) = dense_block_backward(kind, &cfg, &q, &cache, &probe)?;
            Ok((dot(&y, &probe), g.dilated[2].w.clone()))
        },
        &p.dilated[2].w,
        EPS,
        TOL,
    )?;
    Ok(worse(on_x, on_w))
}

fn dstb_check(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = block_cfg();
    let p = DstbParams::init(&cfg, &cfg, Some(2), &mut rng);
    let x = random(vec![2, 2, 6, 6], &mut rng);
    let probe = random(vec![2, 2, 6, 6], &mut rng);
    let on_x = gradcheck(
        |x| {
            let (y, cache) = dstb_forward_cached(x, &cfg, &cfg, &p)?;
            let (g, _) = dstb_backward(&cfg, &cfg, &p, &cache, &probe)?;
            Ok((dot(&y, &probe), g))
        },
        &x,
        EPS,
        TOL,
    )?;
    let w1 = p.spatial_attention.as_ref().expect("attention on").w1.clone();
    let on_gate = gradcheck(
        |w| {
            let mut q = p.clone();
            q.spatial_attention.as_mut().expect("attention on").w1 = w.clone();
            let (y, cache) = dstb_forward_cached(&x, &cfg, &cfg, &q)?;
            let (_, g) = dstb_backward(&cfg, &cfg, &q, &cache, &probe)?;
            Ok((dot(&y, &probe), g.spatial_attention.expect("attention on").w1))
        },
        &w1,
        EPS,
        TOL,
    )?;
    Ok(worse(on_x, on_gate))
}

fn attention_check(pooling: Pooling, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AttentionParams::random(6, 2, &mut rng);
    let x = random(vec![6, 3, 4, 4], &mut rng);
    let probe = random(vec![6, 3, 4, 4], &mut rng);
    let on_x = gradcheck(
        |x| {
            let (y, _) = attention_forward(x, &p, pooling)?;
            let (g, _) = attention_backward(x, &p, pooling, &probe)?;
            Ok((dot(&y, &probe), g))
        },
        &x,
        EPS,
        TOL,
    )?;
    let on_w = gradcheck(
        |w| {
            let q = AttentionParams {
                w1: p.w1.clone(),
                w2: w.clone(),
            };
            let (y, _) = attention_forward(&x, &q, pooling)?;
            let (_, g) = attention_backward(&x, &q, pooling, &probe)?;
            Ok((dot(&y, &probe), g.w2))
        },
        &p.w2,
        EPS,
        TOL,
    )?;
    Ok(worse(on_x, on_w))
}

/// Prediction and target whose difference stays well away from zero, so the
/// ℓ1 kinks are never crossed by the finite-difference stencil.
fn loss_pair(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = Tensor::from_fn(vec![7, 7], |_| rng.gen_range(0.0..1.0));
    let pred = Tensor::from_fn(vec![7, 7], |k| {
        let step = rng.gen_range(0.1..1.0);
        gt.data()[k] + if rng.gen_bool(0.5) { step } else { -step }
    });
    (pred, gt)
}

/// End-to-end check of the tiny network (clip → PRL) on a seeded 6-element
/// parameter probe.
///
/// Central differences are meaningless when the stencil straddles a ReLU or
/// max-pool switch somewhere in the network. Seed 23 draws six coordinates
/// with nonzero gradients and no switch within `EPS`; some other seeds do
/// hit one (seed 11 flips a unit in the first block at `EPS = 1e-5` while
/// agreeing to 3e-6 at `1e-6`).
fn model_check(seed: u64) -> Result<GradcheckReport> {
    let cfg = ModelConfig {
        seed: 3,
        ..ModelConfig::tiny()
    };
    let mut params = ModelParams::init(&cfg)?;
    // Keep the output clamp inactive around the probe point.
    if let Some(b) = params.head[2].b.as_mut() {
        b.data_mut()[0] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = Tensor::from_fn(vec![cfg.depth, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let gt = Tensor::from_fn(vec![16, 16], |_| rng.gen_range(0.0..0.2));
    let coords = probe_coords(&params, 6, seed);
    let x0 = Tensor::from_vec(coords.iter().map(|&(t, k)| params.tensors()[t].data()[k]).collect());
    let pcfg = PrlConfig::default();
    gradcheck(
        |x| {
            let mut p = params.clone();
            {
                let mut slots = p.tensors_mut();
                for (&(t, k), &v) in coords.iter().zip(x.data()) {
                    slots[t].data_mut()[k] = v;
                }
            }
            let tr = forward_traced(&clip, &cfg, &p)?;
            let (rep, g) = prl(std::slice::from_ref(&tr.output), std::slice::from_ref(&gt), &pcfg)?;
            let grads = backward(&cfg, &p, &tr, &g[0])?;
            let gt_refs = grads.tensors();
            Ok((rep.total, Tensor::from_vec(coords.iter().map(|&(t, k)| gt_refs[t].data()[k]).collect())))
        },
        &x0,
        EPS,
        TOL,
    )
}

pub fn run_check(name: &str) -> Result<GradcheckReport> {
    match name {
        "conv1d" => conv_check(ConvKind::Temporal1d, ConvSpec::temporal(2, 3, 3, 2), 1),
        "conv2d" => conv_check(ConvKind::Spatial2d, ConvSpec::spatial(2, 3, 3, 2), 2),
        "conv3d" => conv_check(ConvKind::Full3d, ConvSpec::full3d(2, 2, 3, 2), 3),
        "dsb" => block_check(BlockKind::Spatial, 4),
        "dtb" => block_check(BlockKind::Temporal, 5),
        "dstb" => dstb_check(6),
        "attention" => attention_check(Pooling::Spatiotemporal, 7),
        "attention_per_frame" => attention_check(Pooling::PerFrame, 8),
        "pixelwise_l2" => {
            let (p, g) = loss_pair(9);
            gradcheck(
                |x| {
                    let (r, gr) = pixelwise_l2(std::slice::from_ref(x), std::slice::from_ref(&g))?;
                    Ok((r.total, gr[0].clone()))
                },
                &p,
                EPS,
                TOL,
            )
        }
        "prl" => {
            let (p, g) = loss_pair(10);
            let cfg = PrlConfig::default();
            gradcheck(
                |x| {
                    let (r, gr) = prl(std::slice::from_ref(x), std::slice::from_ref(&g), &cfg)?;
                    Ok((r.total, gr[0].clone()))
                },
                &p,
                EPS,
                TOL,
            )
        }
        "model" => model_check(23),
        other => Err(invalid!("unknown gradcheck op {other:?}; known: {}", OPS.join(", "))),
    }
}

pub fn run_all() -> Vec<(&'static str, Result<GradcheckReport>)> {
    OPS.iter().map(|&op| (op, run_check(op))).collect()
}

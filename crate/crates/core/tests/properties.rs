//! Randomised invariants across modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdnet::attention::{attention_forward, AttentionParams, Pooling};
use stdnet::blocks::{dense_block_forward, dstb_forward, BlockConfig, BlockKind, DenseBlockParams, DstbParams};
use stdnet::conv::{conv1d_temporal, conv2d_dilated, conv3d_dilated, ConvSpec, ConvWeights};
use stdnet::data::{decode_dmap, encode_dmap, gen_synthetic, make_clips, Sequence, SynthSpec};
use stdnet::density::{hflip, render_density, DotAnnotations, SigmaMode};
use stdnet::loss::{prl, PrlConfig};
use stdnet::optim::lr_at;
use stdnet::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn points(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..n).map(|_| (r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_preserves_count(seed in any::<u64>(), n in 0usize..30, h in 1usize..30, w in 1usize..30, adaptive in any::<bool>()) {
        let mut r = rng(seed);
        let ann = DotAnnotations::new(0, points(&mut r, n, h, w), h, w).unwrap();
        let mode = if adaptive { SigmaMode::Adaptive { beta: 0.3, k: 3 } } else { SigmaMode::Fixed(r.gen_range(0.2..6.0)) };
        let sum = mode.render(&ann).unwrap().count();
        prop_assert!((sum - n as f64).abs() < 1e-9, "sum {sum} for {n} points");
    }

    #[test]
    fn density_superposes(seed in any::<u64>(), n in 1usize..8) {
        let mut r = rng(seed);
        let pts = points(&mut r, n, 16, 20);
        let sigmas: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..4.0)).collect();
        let all = render_density(&DotAnnotations::new(0, pts.clone(), 16, 20).unwrap(), &sigmas).unwrap();
        let mut sum = Tensor::zeros(vec![16, 20]);
        for (p, s) in pts.iter().zip(&sigmas) {
            let one = render_density(&DotAnnotations::new(0, vec![*p], 16, 20).unwrap(), &[*s]).unwrap();
            sum.add_assign(one.values()).unwrap();
        }
        for (a, b) in all.values().data().iter().zip(sum.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn density_flip_equivariant(seed in any::<u64>(), n in 0usize..12) {
        let mut r = rng(seed);
        let ann = DotAnnotations::new(3, points(&mut r, n, 12, 17), 12, 17).unwrap();
        let mode = SigmaMode::Fixed(1.5);
        let flipped = mode.render(&hflip(&ann)).unwrap();
        let mirrored = mode.render(&ann).unwrap().mirrored();
        for (a, b) in flipped.values().data().iter().zip(mirrored.values().data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wider_blob_has_lower_peak(s1 in 0.3f64..5.0, grow in 0.05f64..3.0) {
        let ann = DotAnnotations::new(0, vec![(20.0, 20.0)], 41, 41).unwrap();
        let peak = |s: f64| render_density(&ann, &[s]).unwrap().values().data().iter().cloned().fold(0.0, f64::max);
        prop_assert!(peak(s1 + grow) < peak(s1));
    }

    #[test]
    fn rank_one_kernels_factorise(seed in any::<u64>(), r in 1usize..3, d in 1usize..6, h in 1usize..7, w in 1usize..7) {
        let mut g = rng(seed);
        let x = random(vec![1, d, h, w], &mut g);
        let u = random(vec![3], &mut g);
        let v = random(vec![3, 3], &mut g);
        let full = ConvSpec::full3d(1, 1, 3, r).with_bias(false);
        let w3 = Tensor::from_fn(full.weight_shape().to_vec(), |k| u.data()[k / 9] * v.data()[k % 9]);
        let s = ConvSpec::spatial(1, 1, 3, r).with_bias(false);
        let t = ConvSpec::temporal(1, 1, 3, r).with_bias(false);
        let sw = ConvWeights { w: v.reshape(s.weight_shape().to_vec()).unwrap(), b: None };
        let tw = ConvWeights { w: u.reshape(t.weight_shape().to_vec()).unwrap(), b: None };
        let two = conv1d_temporal(&conv2d_dilated(&x, &s, &sw).unwrap(), &t, &tw).unwrap();
        let one = conv3d_dilated(&x, &full, &ConvWeights { w: w3, b: None }).unwrap();
        for (a, b) in one.data().iter().zip(two.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn impulse_lights_exactly_the_taps(r in 1usize..4, seed in any::<u64>()) {
        let mut g = rng(seed);
        let n = 2 * 3 * r + 1;
        let mut x = Tensor::zeros(vec![1, n, n, n]);
        let c = 3 * r;
        x.set(&[0, c, c, c], 1.0);
        let spec = ConvSpec::full3d(1, 1, 3, r).with_bias(false);
        // Nonzero weights everywhere so no tap can vanish.
        let w = Tensor::from_fn(spec.weight_shape().to_vec(), |_| g.gen_range(0.5..1.5));
        let y = conv3d_dilated(&x, &spec, &ConvWeights { w, b: None }).unwrap();
        let mut lit = Vec::new();
        for (k, v) in y.data().iter().enumerate() {
            if *v != 0.0 {
                lit.push((k / (n * n), (k / n) % n, k % n));
            }
        }
        let mut taps = Vec::new();
        for l in [-1isize, 0, 1] {
            for m in [-1isize, 0, 1] {
                for o in [-1isize, 0, 1] {
                    let at = |off: isize| (c as isize - off * r as isize) as usize;
                    taps.push((at(l), at(m), at(o)));
                }
            }
        }
        lit.sort_unstable();
        taps.sort_unstable();
        prop_assert_eq!(lit, taps);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_keep_extents_and_widths(seed in any::<u64>(), cin in 1usize..5, growth in 1usize..4, n_rates in 1usize..4, d in 1usize..4, hw in 1usize..6) {
        let mut g = rng(seed);
        let cfg = BlockConfig {
            in_channels: cin,
            bottleneck_channels: 2,
            growth_channels: growth,
            dilation_rates: (1..=n_rates).collect(),
            fuse_to: cin,
        };
        for i in 0..n_rates {
            prop_assert_eq!(cfg.stack_width(i), cin + i * growth);
        }
        prop_assert_eq!(cfg.fused_input_width(), cin + n_rates * growth);
        let x = random(vec![cin, d, hw, hw + 1], &mut g);
        for kind in [BlockKind::Spatial, BlockKind::Temporal] {
            let p = DenseBlockParams::init(kind, &cfg, &mut g);
            prop_assert_eq!(p.fuse.w.shape()[1], cfg.fused_input_width());
            let (y, _) = dense_block_forward(kind, &x, &cfg, &p).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
        }
        let p = DstbParams::init(&cfg, &cfg, Some(2), &mut g);
        let y = dstb_forward(&x, &cfg, &cfg, &p).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn attention_never_grows_a_channel(seed in any::<u64>(), c in 1usize..12, rho in 1usize..5, per_frame in any::<bool>()) {
        let mut g = rng(seed);
        let x = Tensor::from_fn(vec![c, 3, 4, 4], |_| g.gen_range(-5.0..5.0));
        let p = AttentionParams::random(c, rho, &mut g);
        let pooling = if per_frame { Pooling::PerFrame } else { Pooling::Spatiotemporal };
        let (y, alpha) = attention_forward(&x, &p, pooling).unwrap();
        prop_assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
        let per = x.len() / c;
        for ch in 0..c {
            let norm = |t: &Tensor| t.data()[ch * per..(ch + 1) * per].iter().map(|v| v * v).sum::<f64>();
            let (nx, ny) = (norm(&x), norm(&y));
            prop_assert!(ny <= nx);
            if nx > 0.0 {
                prop_assert!(ny < nx);
            }
        }
    }

    #[test]
    fn attention_commutes_with_channel_permutation(seed in any::<u64>(), c in 2usize..9) {
        let mut g = rng(seed);
        let x = random(vec![c, 2, 3, 3], &mut g);
        let p = AttentionParams::random(c, 2, &mut g);
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, g.gen_range(0..=i));
        }
        let per = x.len() / c;
        let xp = Tensor::from_fn(x.shape().to_vec(), |k| x.data()[perm[k / per] * per + k % per]);
        let hidden = p.hidden();
        let q = AttentionParams {
            w1: Tensor::from_fn(vec![hidden, c], |k| p.w1.data()[(k / c) * c + perm[k % c]]),
            w2: Tensor::from_fn(vec![c, hidden], |k| p.w2.data()[perm[k / hidden] * hidden + k % hidden]),
        };
        let (_, a) = attention_forward(&x, &p, Pooling::Spatiotemporal).unwrap();
        let (_, b) = attention_forward(&xp, &q, Pooling::Spatiotemporal).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            prop_assert!((b.data()[i] - a.data()[pi]).abs() < 1e-14);
        }
    }

    #[test]
    fn prl_total_is_weighted_sum(seed in any::<u64>(), l1 in 0.0f64..5.0, l2 in 0.0f64..20.0, l3 in 0.0f64..5.0) {
        let mut g = rng(seed);
        let pred = vec![random(vec![6, 7], &mut g), random(vec![6, 7], &mut g)];
        let gt = vec![random(vec![6, 7], &mut g), random(vec![6, 7], &mut g)];
        let cfg = PrlConfig { n_p: 3, lambdas: vec![l1, l2, l3], sigma: 1.0 };
        let (rep, _) = prl(&pred, &gt, &cfg).unwrap();
        let sum: f64 = rep.per_patch.iter().map(|t| t.lambda * t.value).sum();
        prop_assert!((rep.total - sum).abs() < 1e-12);
        prop_assert!(rep.per_patch.iter().all(|t| t.value >= 0.0));
    }

    #[test]
    fn dmap_round_trip_at_f32(seed in any::<u64>(), h in 1usize..40, w in 1usize..40) {
        let mut g = rng(seed);
        let t = Tensor::from_fn(vec![h, w], |_| g.gen_range(-1e6..1e6) as f32 as f64);
        let back = decode_dmap(&encode_dmap(&t).unwrap(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn stride_one_windows_cover_each_tail_once(n in 1usize..20, depth in 1usize..8) {
        prop_assume!(depth <= n);
        let ann = DotAnnotations::new(0, Vec::new(), 2, 2).unwrap();
        let seq = Sequence { frames: vec![Tensor::zeros(vec![1, 2, 2]); n], annotations: vec![ann; n] };
        let clips = make_clips(&seq, 0, depth, 1).unwrap();
        let tails: Vec<usize> = clips.iter().map(|c| c.end_frame).collect();
        prop_assert_eq!(tails, (depth - 1..n).collect::<Vec<_>>());
        prop_assert!(clips.iter().all(|c| c.frames.shape()[0] == depth));
    }
}

#[test]
fn schedule_is_nonincreasing_and_halves_on_multiples_of_30() {
    for e in 0..400 {
        let base = 1e-4;
        assert!(lr_at(e + 1, base) <= lr_at(e, base));
        if e % 30 == 0 && e > 0 {
            assert_eq!(lr_at(e, base), lr_at(e - 1, base) / 2.0);
        }
    }
}

#[test]
fn synthetic_ground_truth_counts_people_exactly() {
    let spec = SynthSpec {
        sequences: 6,
        ..SynthSpec::default()
    };
    let ds = gen_synthetic(&spec).unwrap();
    assert!(!ds.clips.is_empty());
    for c in &ds.clips {
        let n = c.annotations.count();
        assert!((spec.people[0]..=spec.people[1]).contains(&n));
        assert!((ds.ground_truth(c).unwrap().count() - n as f64).abs() < 1e-9);
    }
}

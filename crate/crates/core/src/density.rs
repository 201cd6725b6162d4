//! Ground-truth density maps from dot annotations.
//!
//! Each annotated head becomes a truncated 2D Gaussian (radius `ceil(4σ)`)
//! sampled at integer pixel coordinates and renormalized over the pixels that
//! survive truncation and image clipping, so every blob integrates to exactly
//! one person.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Width used when a kernel cannot be adapted (no neighbours).
pub const FALLBACK_SIGMA: f64 = 3.0;
/// Lower bound on adaptive widths; coincident dots would otherwise give σ = 0.
pub const MIN_ADAPTIVE_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DotAnnotations {
    pub frame_id: i64,
    /// `(x, y)` = (column, row) in pixels.
    pub points: Vec<(f64, f64)>,
    pub height: usize,
    pub width: usize,
}

impl DotAnnotations {
    /// Validates `0 <= x < width` and `0 <= y < height` for every point.
    pub fn new(
        frame_id: i64,
        points: Vec<(f64, f64)>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image size must be positive, got {height}x{width}"));
        }
        for &(x, y) in &points {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..width as f64).contains(&x)
                && (0.0..height as f64).contains(&y);
            if !inside {
                return Err(Error::PointOutOfBounds {
                    frame: frame_id,
                    x,
                    y,
                    height,
                    width,
                });
            }
        }
        Ok(Self {
            frame_id,
            points,
            height,
            width,
        })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Nonnegative `[H, W]` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    values: Tensor,
}

impl DensityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(invalid!("density map must be rank 2, got {:?}", values.shape()));
        }
        if values.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!("density map entries must be finite and nonnegative"));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Tensor::zeros(vec![height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn count(&self) -> f64 {
        self.values.sum()
    }

    /// Left-right mirror of the raster.
    pub fn mirrored(&self) -> DensityMap {
        DensityMap {
            values: mirror_rows(&self.values),
        }
    }
}

/// Mirrors the innermost axis of any tensor.
pub fn mirror_rows(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("rank >= 1");
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Mean distance from each point to its `k` nearest other points.
///
/// Points with no other points get `None`. Fewer than `k` neighbours are
/// averaged over however many exist. Ties are ordered by (distance, index).
pub fn knn_mean_distance(points: &[(f64, f64)], k: usize) -> Result<Vec<Option<f64>>> {
    if k == 0 {
        return Err(invalid!("k must be at least 1"));
    }
    let mut out = Vec::with_capacity(points.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for (i, &(xi, yi)) in points.iter().enumerate() {
        dists.clear();
        dists.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &(xj, yj))| ((xi - xj).hypot(yi - yj), j)),
        );
        if dists.is_empty() {
            out.push(None);
            continue;
        }
        let take = k.min(dists.len());
        if take < dists.len() {
            dists.select_nth_unstable_by(take - 1, |a, b| a.partial_cmp(b).unwrap());
        }
        let nearest = &mut dists[..take];
        nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(Some(nearest.iter().map(|d| d.0).sum::<f64>() / take as f64));
    }
    Ok(out)
}

/// Geometry-adaptive widths `σ_j = beta · d̄_j`, floored at
/// [`MIN_ADAPTIVE_SIGMA`], or [`FALLBACK_SIGMA`] for isolated points.
pub fn adaptive_sigmas(ann: &DotAnnotations, beta: f64, k: usize) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid!("beta must be positive, got {beta}"));
    }
    Ok(knn_mean_distance(&ann.points, k)?
        .into_iter()
        .map(|d| match d {
            Some(d) => (beta * d).max(MIN_ADAPTIVE_SIGMA),
            None => FALLBACK_SIGMA,
        })
        .collect())
}

/// Renders one unit-mass blob per point.
pub fn render_density(ann: &DotAnnotations, sigma_per_point: &[f64]) -> Result<DensityMap> {
    if sigma_per_point.len() != ann.points.len() {
        return Err(invalid!(
            "{} sigmas for {} points",
            sigma_per_point.len(),
            ann.points.len()
        ));
    }
    let (h, w) = (ann.height, ann.width);
    let mut values = Tensor::zeros(vec![h, w]);
    let mut blob = Vec::new();
    for (&(x, y), &sigma) in ann.points.iter().zip(sigma_per_point) {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid!("sigma must be positive, got {sigma}"));
        }
        add_blob(values.data_mut(), h, w, x, y, sigma, &mut blob);
    }
    DensityMap::new(values)
}

fn add_blob(out: &mut [f64], h: usize, w: usize, x: f64, y: f64, sigma: f64, blob: &mut Vec<f64>) {
    let radius = (4.0 * sigma).ceil();
    let clip = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
        let lo = lo.ceil().max(0.0);
        let hi = hi.floor().min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let (Some((c0, c1)), Some((r0, r1))) = (
        clip(x - radius, x + radius, w),
        clip(y - radius, y + radius, h),
    ) else {
        return;
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let cols = c1 - c0 + 1;
    blob.clear();
    let mut total = 0.0;
    for i in r0..=r1 {
        let dy = i as f64 - y;
        for j in c0..=c1 {
            let dx = j as f64 - x;
            let v = (-(dx * dx + dy * dy) * inv).exp();
            total += v;
            blob.push(v);
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        // Underflow for extremely narrow kernels: put the mass on the nearest pixel.
        let i = (y.round().max(0.0) as usize).min(h - 1);
        let j = (x.round().max(0.0) as usize).min(w - 1);
        out[i * w + j] += 1.0;
        return;
    }
    for (bi, i) in (r0..=r1).enumerate() {
        let row = &mut out[i * w + c0..i * w + c1 + 1];
        for (o, v) in row.iter_mut().zip(&blob[bi * cols..(bi + 1) * cols]) {
            *o += v / total;
        }
    }
}

/// Mirror about the vertical centre line: `x' = W - 1 - x`.
///
/// A point in `(W - 1, W)` maps into `(-1, 0)`; it is kept as is so that
/// rendering stays exactly equivariant under the flip.
pub fn hflip(ann: &DotAnnotations) -> DotAnnotations {
    let w = ann.width as f64;
    DotAnnotations {
        frame_id: ann.frame_id,
        points: ann.points.iter().map(|&(x, y)| (w - 1.0 - x, y)).collect(),
        height: ann.height,
        width: ann.width,
    }
}

/// How per-point kernel widths are chosen for a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaMode {
    Fixed(f64),
    Adaptive { beta: f64, k: usize },
}

impl Default for SigmaMode {
    fn default() -> Self {
        SigmaMode::Fixed(FALLBACK_SIGMA)
    }
}

impl SigmaMode {
    pub fn sigmas(&self, ann: &DotAnnotations) -> Result<Vec<f64>> {
        match *self {
            SigmaMode::Fixed(s) => Ok(vec![s; ann.points.len()]),
            SigmaMode::Adaptive { beta, k } => adaptive_sigmas(ann, beta, k),
        }
    }

    pub fn render(&self, ann: &DotAnnotations) -> Result<DensityMap> {
        render_density(ann, &self.sigmas(ann)?)
    }
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaMode::Fixed(s) => write!(f, "fixed:{s}"),
            SigmaMode::Adaptive { beta, k } => write!(f, "adaptive:{beta},{k}"),
        }
    }
}

impl FromStr for SigmaMode {
    type Err = Error;

    /// `fixed:<sigma>` or `adaptive:<beta>,<k>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid!("sigma mode {s:?}: expected fixed:<sigma> or adaptive:<beta>,<k>");
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => {
                let sigma: f64 = args.trim().parse().map_err(|_| bad())?;
                if !(sigma > 0.0) {
                    return Err(bad());
                }
                Ok(SigmaMode::Fixed(sigma))
            }
            "adaptive" => {
                let (b, k) = args.split_once(',').ok_or_else(bad)?;
                let beta: f64 = b.trim().parse().map_err(|_| bad())?;
                let k: usize = k.trim().parse().map_err(|_| bad())?;
                if !(beta > 0.0) || k == 0 {
                    return Err(bad());
                }
                Ok(SigmaMode::Adaptive { beta, k })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for SigmaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SigmaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(points: Vec<(f64, f64)>, h: usize, w: usize) -> DotAnnotations {
        DotAnnotations::new(0, points, h, w).unwrap()
    }

    /// Sorts every pairwise distance; independent of the selection path.
    fn brute_knn(points: &[(f64, f64)], k: usize) -> Vec<Option<f64>> {
        (0..points.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let dx = points[i].0 - points[j].0;
                        let dy = points[i].1 - points[j].1;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = k.min(d.len());
                (n > 0).then(|| d[..n].iter().sum::<f64>() / n as f64)
            })
            .collect()
    }

    #[test]
    fn knn_triangle() {
        let d = knn_mean_distance(&[(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)], 2).unwrap();
        assert_eq!(d[0], Some(3.5));
    }

    #[test]
    fn knn_duplicates_and_degenerate() {
        let d = knn_mean_distance(&[(1.0, 1.0), (1.0, 1.0)], 3).unwrap();
        assert_eq!(d, vec![Some(0.0), Some(0.0)]);
        assert_eq!(knn_mean_distance(&[(1.0, 1.0)], 3).unwrap(), vec![None]);
        assert!(knn_mean_distance(&[], 3).unwrap().is_empty());
        assert!(knn_mean_distance(&[(1.0, 1.0)], 0).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..5)
            .map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)))
            .collect();
        let got = knn_mean_distance(&pts, 3).unwrap();
        for (g, e) in got.iter().zip(brute_knn(&pts, 3)) {
            assert!((g.unwrap() - e.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_examples() {
        let a = ann(vec![(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)], 10, 10);
        let s = adaptive_sigmas(&a, 0.3, 2).unwrap();
        assert!((s[0] - 1.05).abs() < 1e-12);
        let single = ann(vec![(4.0, 4.0)], 10, 10);
        assert_eq!(adaptive_sigmas(&single, 0.3, 3).unwrap(), vec![3.0]);
        let dup = ann(vec![(4.0, 4.0), (4.0, 4.0)], 10, 10);
        assert_eq!(adaptive_sigmas(&dup, 0.3, 3).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn adaptive_grid_matches_brute_force() {
        let pts: Vec<_> = (0..10)
            .map(|i| (2.0 + 3.0 * (i % 5) as f64, 3.0 + 4.5 * (i / 5) as f64))
            .collect();
        let a = ann(pts.clone(), 20, 20);
        let s = adaptive_sigmas(&a, 0.3, 3).unwrap();
        for (got, d) in s.iter().zip(brute_knn(&pts, 3)) {
            assert!((got - (0.3 * d.unwrap()).max(0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_blob_centred() {
        let a = ann(vec![(12.0, 12.0)], 25, 25);
        let dm = render_density(&a, &[3.0]).unwrap();
        assert!((dm.count() - 1.0).abs() < 1e-9);
        let (argmax, _) = dm
            .values()
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert_eq!(argmax, 12 * 25 + 12);
    }

    #[test]
    fn empty_frame_renders_zero() {
        let dm = render_density(&ann(vec![], 8, 8), &[]).unwrap();
        assert_eq!(dm.count(), 0.0);
    }

    #[test]
    fn superposition_of_mixed_sigmas() {
        let pts = vec![(1.0, 2.0), (10.5, 7.25), (15.0, 0.0)];
        let sig = [0.7, 2.0, 4.0];
        let all = render_density(&ann(pts.clone(), 16, 18), &sig).unwrap();
        assert!((all.count() - 3.0).abs() < 1e-9);
        let mut sum = Tensor::zeros(vec![16, 18]);
        for (p, s) in pts.iter().zip(sig) {
            let one = render_density(&ann(vec![*p], 16, 18), &[s]).unwrap();
            sum.add_assign(one.values()).unwrap();
        }
        for (a, b) in all.values().data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_sigma_and_lengths() {
        let a = ann(vec![(1.0, 1.0)], 4, 4);
        assert!(render_density(&a, &[0.0]).is_err());
        assert!(render_density(&a, &[]).is_err());
    }

    #[test]
    fn tiny_sigma_keeps_mass() {
        let a = ann(vec![(1.5, 1.5)], 4, 4);
        let dm = render_density(&a, &[1e-4]).unwrap();
        assert!((dm.count() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hflip_examples() {
        let a = ann(vec![(0.0, 5.0), (4.5, 2.0)], 8, 10);
        let f = hflip(&a);
        assert_eq!(f.points, vec![(9.0, 5.0), (4.5, 2.0)]);
    }

    #[test]
    fn spread_lowers_peak() {
        let a = ann(vec![(15.0, 15.0)], 31, 31);
        let mut last = f64::INFINITY;
        for s in [0.5, 0.8, 1.0, 1.5, 2.0, 3.0, 4.0] {
            let peak = render_density(&a, &[s]).unwrap().values().get(&[15, 15]);
            assert!(peak < last);
            last = peak;
        }
    }

    #[test]
    fn sigma_mode_parsing() {
        assert_eq!("fixed:3".parse::<SigmaMode>().unwrap(), SigmaMode::Fixed(3.0));
        assert_eq!(
            "adaptive:0.3,3".parse::<SigmaMode>().unwrap(),
            SigmaMode::Adaptive { beta: 0.3, k: 3 }
        );
        assert!("fixed:-1".parse::<SigmaMode>().is_err());
        assert!("gauss:3".parse::<SigmaMode>().is_err());
    }

    #[test]
    fn out_of_bounds_rejected() {
        let e = DotAnnotations::new(7, vec![(70.0, 3.0)], 64, 64).unwrap_err();
        assert!(e.to_string().contains("frame 7"));
    }

    proptest! {
        #[test]
        fn flip_equivariance(
            pts in prop::collection::vec((0.0f64..13.0, 0.0f64..9.0), 0..8),
            sigma in 0.5f64..4.0,
        ) {
            let a = ann(pts, 9, 13);
            let sig = vec![sigma; a.points.len()];
            let direct = render_density(&hflip(&a), &sig).unwrap();
            let mirrored = render_density(&a, &sig).unwrap().mirrored();
            for (x, y) in direct.values().data().iter().zip(mirrored.values().data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

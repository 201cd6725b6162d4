//! File formats, the synthetic moving-crowd generator and clip assembly.
//!
//! On disk a dataset is a directory holding `dataset.json` plus one
//! subdirectory per sequence. Each sequence directory has an
//! `annotations.json` and one `fNNNNN_cC.dmap` raster per frame and channel.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{DensityMap, DotAnnotations, SigmaMode};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    size: [usize; 2],
    frames: Vec<AnnotationFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFrame {
    id: i64,
    points: Vec<[f64; 2]>,
}

pub fn parse_annotations(text: &str) -> Result<Vec<DotAnnotations>> {
    let file: AnnotationFile = serde_json::from_str(text)?;
    let [h, w] = file.size;
    file.frames
        .into_iter()
        .map(|f| DotAnnotations::new(f.id, f.points.into_iter().map(|[x, y]| (x, y)).collect(), h, w))
        .collect()
}

pub fn load_annotations(path: &Path) -> Result<Vec<DotAnnotations>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// Writes frames sharing one image size. An empty list needs the size
/// supplied explicitly.
pub fn save_annotations(path: &Path, frames: &[DotAnnotations], size: [usize; 2]) -> Result<()> {
    if let Some(f) = frames.iter().find(|f| [f.height, f.width] != size) {
        return Err(invalid!("frame {} is {}x{}, expected {size:?}", f.frame_id, f.height, f.width));
    }
    let file = AnnotationFile {
        size,
        frames: frames
            .iter()
            .map(|f| AnnotationFrame {
                id: f.frame_id,
                points: f.points.iter().map(|&(x, y)| [x, y]).collect(),
            })
            .collect(),
    };
    write_bytes(path, serde_json::to_string_pretty(&file)?.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityFormat {
    Dmap,
    Csv,
}

impl DensityFormat {
    /// `.csv` selects CSV; anything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DensityFormat::Csv,
            _ => DensityFormat::Dmap,
        }
    }
}

/// `"DMAP"`, `u32` H, `u32` W, then `H·W` little-endian `f32`, row-major.
pub fn encode_dmap(raster: &Tensor) -> Result<Vec<u8>> {
    let &[h, w] = raster.shape() else {
        return Err(invalid!("dmap holds [H, W] rasters, got {:?}", raster.shape()));
    };
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&u32_dim(h)?.to_le_bytes());
    out.extend_from_slice(&u32_dim(w)?.to_le_bytes());
    for &v in raster.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_dim(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| invalid!("dimension {n} does not fit in u32"))
}

pub fn decode_dmap(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != DMAP_MAGIC {
        return Err(bad("missing DMAP header".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let want = h.checked_mul(w).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(12));
    if h == 0 || w == 0 || want != Some(bytes.len()) {
        return Err(bad(format!("{h}x{w} header does not match {} bytes", bytes.len())));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![h, w], data)
}

pub fn write_raster(raster: &Tensor, path: &Path, format: DensityFormat) -> Result<()> {
    match format {
        DensityFormat::Dmap => write_bytes(path, &encode_dmap(raster)?),
        DensityFormat::Csv => {
            let &[_, w] = raster.shape() else {
                return Err(invalid!("csv holds [H, W] rasters, got {:?}", raster.shape()));
            };
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
            for row in raster.data().chunks_exact(w) {
                out.write_record(row.iter().map(|v| v.to_string()))?;
            }
            out.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_raster(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match DensityFormat::from_path(path) {
        DensityFormat::Dmap => decode_dmap(&bytes, path),
        DensityFormat::Csv => {
            let mut rows = Vec::new();
            let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
            for rec in reader.records() {
                let row = rec?
                    .iter()
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        reason: e.to_string(),
                    })?;
                rows.push(row);
            }
            let w = rows.first().map_or(0, Vec::len);
            if rows.is_empty() || w == 0 || rows.iter().any(|r| r.len() != w) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: "csv raster must be a nonempty rectangle".into(),
                });
            }
            Tensor::new(vec![rows.len(), w], rows.concat())
        }
    }
}

pub fn export_density(dm: &DensityMap, path: &Path, format: DensityFormat) -> Result<()> {
    write_raster(dm.values(), path, format)
}

pub fn import_density(path: &Path) -> Result<DensityMap> {
    DensityMap::new(read_raster(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    UcsdLike,
    MallLike,
    ExpoLike,
    Synthetic,
}

impl Preset {
    pub fn default_depth(self) -> usize {
        match self {
            Preset::UcsdLike | Preset::Synthetic => 10,
            Preset::MallLike => 8,
            Preset::ExpoLike => 5,
        }
    }

    pub fn default_channels(self) -> usize {
        match self {
            Preset::MallLike => 3,
            _ => 1,
        }
    }
}

/// A run of consecutive frames with per-frame annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// Each `[C, H, W]`.
    pub frames: Vec<Tensor>,
    pub annotations: Vec<DotAnnotations>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `[T, C, H, W]`
    pub frames: Tensor,
    /// Annotations of the last frame.
    pub annotations: DotAnnotations,
    pub sequence: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipDataset {
    pub clips: Vec<Clip>,
    pub depth: usize,
    pub preset: Preset,
    /// Kernel rule for ground-truth densities.
    pub sigma: SigmaMode,
}

impl ClipDataset {
    pub fn ground_truth(&self, clip: &Clip) -> Result<DensityMap> {
        self.sigma.render(&clip.annotations)
    }

    /// Clips `[0, n_train)` train, the rest validate.
    pub fn split_index(&self, val_fraction: f64) -> usize {
        let n = self.clips.len();
        let val = ((n as f64) * val_fraction).round() as usize;
        n - val.min(n)
    }
}

fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| invalid!("clip with no frames"))?;
    let parts: Vec<&Tensor> = frames.iter().collect();
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    Tensor::concat0(&parts)?.into_shape(shape)
}

/// Sliding windows of `depth` frames at `stride`, each labelled with its
/// last frame.
pub fn make_clips(seq: &Sequence, seq_index: usize, depth: usize, stride: usize) -> Result<Vec<Clip>> {
    if depth == 0 || stride == 0 {
        return Err(invalid!("clip depth and stride must be positive"));
    }
    if seq.frames.len() != seq.annotations.len() {
        return Err(invalid!("{} frames but {} annotation entries", seq.frames.len(), seq.annotations.len()));
    }
    if depth > seq.frames.len() {
        return Err(invalid!("clip depth {depth} exceeds the {} available frames", seq.frames.len()));
    }
    (0..=seq.frames.len() - depth)
        .step_by(stride)
        .map(|start| {
            let end = start + depth - 1;
            Ok(Clip {
                frames: stack_frames(&seq.frames[start..=end])?,
                annotations: seq.annotations[end].clone(),
                sequence: seq_index,
                end_frame: end,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive person-count range per sequence.
    pub people: [usize; 2],
    /// Speed range in pixels per frame; each person draws its own.
    pub speed: [f64; 2],
    /// Width of the rendered blob for each person.
    pub appearance_sigma: f64,
    pub channels: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    pub depth: usize,
    pub stride: usize,
    pub sigma: SigmaMode,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sequences: 40,
            frames: 10,
            height: 32,
            width: 32,
            people: [1, 6],
            speed: [0.0, 2.0],
            appearance_sigma: 1.5,
            channels: 1,
            noise: 0.0,
            depth: 10,
            stride: 10,
            sigma: SigmaMode::Fixed(2.0),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid!("synthetic sizes must be positive"));
        }
        if self.people[0] > self.people[1] {
            return Err(invalid!("people range {:?} is reversed", self.people));
        }
        let [lo, hi] = self.speed;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(invalid!("speed range {:?} must be finite, nonnegative and ordered", self.speed));
        }
        if !(self.appearance_sigma > 0.0) || !(self.noise >= 0.0) {
            return Err(invalid!("appearance sigma must be positive and noise nonnegative"));
        }
        if self.depth == 0 || self.depth > self.frames || self.stride == 0 {
            return Err(invalid!("clip depth {} and stride {} do not fit {} frames", self.depth, self.stride, self.frames));
        }
        Ok(())
    }
}

/// Folds `p` into `[0, max]` by mirror reflection at both ends.
fn reflect(p: f64, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let q = p.rem_euclid(period);
    if q <= max {
        q
    } else {
        period - q
    }
}

fn render_frame(points: &[(f64, f64)], spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0f64; h * w];
    let s2 = 2.0 * spec.appearance_sigma * spec.appearance_sigma;
    let reach = (4.0 * spec.appearance_sigma).ceil() as isize;
    for &(px, py) in points {
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        for i in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for j in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let (dx, dy) = (j as f64 - px, i as f64 - py);
                img[i as usize * w + j as usize] += (-(dx * dx + dy * dy) / s2).exp();
            }
        }
    }
    if spec.noise > 0.0 {
        let n = rand_distr::Normal::new(0.0, spec.noise).expect("finite noise");
        for v in &mut img {
            *v += rand_distr::Distribution::sample(&n, rng);
        }
    }
    // Stored at f32 precision so datasets round-trip through disk exactly.
    let plane: Vec<f64> = img.into_iter().map(|v| v as f32 as f64).collect();
    let mut data = Vec::with_capacity(spec.channels * h * w);
    for _ in 0..spec.channels {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![spec.channels, h, w], data).expect("positive sizes")
}

/// One sequence of people moving at constant, individually drawn velocities
/// and reflecting at the image border.
pub fn gen_sequence(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Sequence> {
    let (xmax, ymax) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    let n = rng.gen_range(spec.people[0]..=spec.people[1]);
    let people: Vec<((f64, f64), (f64, f64))> = (0..n)
        .map(|_| {
            let start = (rng.gen_range(0.0..=xmax), rng.gen_range(0.0..=ymax));
            let speed = if spec.speed[1] > spec.speed[0] {
                rng.gen_range(spec.speed[0]..=spec.speed[1])
            } else {
                spec.speed[0]
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            (start, (speed * angle.cos(), speed * angle.sin()))
        })
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut annotations = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let tf = t as f64;
        let points: Vec<(f64, f64)> = people
            .iter()
            .map(|&((x0, y0), (vx, vy))| (reflect(x0 + vx * tf, xmax), reflect(y0 + vy * tf, ymax)))
            .collect();
        frames.push(render_frame(&points, spec, rng));
        annotations.push(DotAnnotations::new(t as i64, points, spec.height, spec.width)?);
    }
    Ok(Sequence { frames, annotations })
}

pub fn gen_sequences(spec: &SynthSpec) -> Result<Vec<Sequence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.sequences).map(|_| gen_sequence(spec, &mut rng)).collect()
}

pub fn assemble(sequences: &[Sequence], depth: usize, stride: usize, preset: Preset, sigma: SigmaMode) -> Result<ClipDataset> {
    let mut clips = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        clips.extend(make_clips(s, i, depth, stride)?);
    }
    if let Some(c) = clips.first() {
        let shape = c.frames.shape().to_vec();
        if let Some(bad) = clips.iter().find(|k| k.frames.shape() != shape) {
            return Err(Error::shape("dataset frames", &shape, bad.frames.shape()));
        }
    }
    Ok(ClipDataset {
        clips,
        depth,
        preset,
        sigma,
    })
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<ClipDataset> {
    assemble(&gen_sequences(spec)?, spec.depth, spec.stride, Preset::Synthetic, spec.sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub preset: Preset,
    pub depth: usize,
    pub stride: usize,
    pub channels: usize,
    pub sigma: SigmaMode,
    pub sequences: Vec<String>,
}

fn frame_file(t: usize, c: usize) -> String {
    format!("f{t:05}_c{c}.dmap")
}

pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = seq.annotations.first().map_or([1, 1], |a| [a.height, a.width]);
    save_annotations(&dir.join("annotations.json"), &seq.annotations, first)?;
    for (t, f) in seq.frames.iter().enumerate() {
        for c in 0..f.shape()[0] {
            write_raster(&f.slice0(c, c + 1)?.into_shape(f.shape()[1..].to_vec())?, &dir.join(frame_file(t, c)), DensityFormat::Dmap)?;
        }
    }
    Ok(())
}

/// Reads a sequence directory; `channels` frames per time step.
pub fn load_sequence(dir: &Path, channels: usize) -> Result<Sequence> {
    let annotations = load_annotations(&dir.join("annotations.json"))?;
    let mut frames = Vec::with_capacity(annotations.len());
    for t in 0..annotations.len() {
        let planes = (0..channels)
            .map(|c| read_raster(&dir.join(frame_file(t, c))))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = planes.iter().collect();
        let [h, w] = [planes[0].shape()[0], planes[0].shape()[1]];
        frames.push(Tensor::concat0(&refs)?.into_shape(vec![channels, h, w])?);
    }
    Ok(Sequence { frames, annotations })
}

pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, sequences: &[Sequence]) -> Result<()> {
    if manifest.sequences.len() != sequences.len() {
        return Err(invalid!("manifest names {} sequences, got {}", manifest.sequences.len(), sequences.len()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, seq) in manifest.sequences.iter().zip(sequences) {
        save_sequence(&dir.join(name), seq)?;
    }
    write_bytes(&dir.join("dataset.json"), serde_json::to_string_pretty(manifest)?.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(dir: &Path) -> Result<ClipDataset> {
    let m = load_manifest(dir)?;
    let seqs = m
        .sequences
        .iter()
        .map(|s| load_sequence(&dir.join(s), m.channels))
        .collect::<Result<Vec<_>>>()?;
    assemble(&seqs, m.depth, m.stride, m.preset, m.sigma)
}

/// Generates a synthetic suite and writes it under `dir`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    let seqs = gen_sequences(spec)?;
    let manifest = DatasetManifest {
        preset: Preset::Synthetic,
        depth: spec.depth,
        stride: spec.stride,
        channels: spec.channels,
        sigma: spec.sigma,
        sequences: (0..seqs.len()).map(|i| format!("seq{i:03}")).collect(),
    };
    save_dataset(dir, &manifest, &seqs)?;
    Ok(manifest)
}

/// The last `depth` frames of a sequence directory as one clip.
pub fn load_clip(dir: &Path, channels: usize, depth: usize) -> Result<Clip> {
    let seq = load_sequence(dir, channels)?;
    let n = seq.frames.len();
    if depth > n {
        return Err(invalid!("{} holds {n} frames, fewer than the clip depth {depth}", dir.display()));
    }
    make_clips(&seq, 0, depth, 1)?.pop().ok_or_else(|| invalid!("empty sequence"))
}

pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(load_manifest(dir)?.sequences.into_iter().map(|s| dir.join(s)).collect())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_schema_examples() {
        let a = parse_annotations(r#"{"frames":[{"id":0,"points":[[3.5,7.0]]}],"size":[64,64]}"#).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].points, vec![(3.5, 7.0)]);
        assert!(parse_annotations(r#"{"frames":[],"size":[64,64]}"#).unwrap().is_empty());
        let err = parse_annotations(r#"{"frames":[{"id":0,"points":[[70,3]]}],"size":[64,64]}"#).unwrap_err();
        assert!(matches!(err, Error::PointOutOfBounds { frame: 0, .. }), "{err}");
        assert!(err.to_string().contains("frame 0"));
        assert_eq!(parse_annotations("{").unwrap_err().code(), "json");
    }

    #[test]
    fn dmap_layout() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = encode_dmap(&t).unwrap();
        assert_eq!(b.len(), 4 + 4 + 4 + 16);
        assert_eq!(&b[..4], b"DMAP");
        assert_eq!(decode_dmap(&b, Path::new("x")).unwrap(), t);
        assert_eq!(decode_dmap(&b[..15], Path::new("x")).unwrap_err().code(), "bad-format");
    }

    #[test]
    fn reflect_stays_in_range() {
        assert_eq!(reflect(3.0, 10.0), 3.0);
        assert_eq!(reflect(12.0, 10.0), 8.0);
        assert_eq!(reflect(-2.0, 10.0), 2.0);
        assert_eq!(reflect(25.0, 10.0), 5.0);
        for k in 0..1000 {
            let r = reflect(k as f64 * 0.37 - 100.0, 31.0);
            assert!((0.0..=31.0).contains(&r));
        }
    }

    fn seq_of(n: usize) -> Sequence {
        let spec = SynthSpec {
            frames: n,
            depth: 1,
            stride: 1,
            ..SynthSpec::default()
        };
        gen_sequence(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn windowing_examples() {
        let s = seq_of(12);
        let c = make_clips(&s, 0, 10, 1).unwrap();
        assert_eq!(c.iter().map(|c| c.end_frame).collect::<Vec<_>>(), vec![9, 10, 11]);
        assert_eq!(c[0].frames.shape(), &[10, 1, 32, 32]);
        assert_eq!(make_clips(&s, 0, 12, 1).unwrap().len(), 1);
        assert_eq!(make_clips(&s, 0, 4, 4).unwrap().len(), 3);
        assert_eq!(make_clips(&s, 0, 5, 5).unwrap().len(), 2);
        assert!(make_clips(&s, 0, 13, 1).is_err());
        let ends: Vec<_> = make_clips(&s, 0, 4, 1).unwrap().iter().map(|c| c.end_frame).collect();
        assert_eq!(ends, (3..12).collect::<Vec<_>>());
    }

    #[test]
    fn static_person_gives_identical_frames() {
        let spec = SynthSpec {
            sequences: 1,
            people: [1, 1],
            speed: [0.0, 0.0],
            ..SynthSpec::default()
        };
        let s = &gen_sequences(&spec).unwrap()[0];
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
        for a in &s.annotations {
            assert_eq!(a.count(), 1);
            assert!((spec.sigma.render(a).unwrap().count() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn velocities_are_constant_away_from_walls() {
        let spec = SynthSpec {
            sequences: 30,
            frames: 6,
            width: 200,
            height: 200,
            people: [2, 2],
            speed: [1.0, 3.0],
            depth: 1,
            stride: 1,
            ..SynthSpec::default()
        };
        let mut checked = 0;
        for s in gen_sequences(&spec).unwrap() {
            for p in 0..2 {
                let xs: Vec<_> = s.annotations.iter().map(|a| a.points[p]).collect();
                let interior = xs.iter().all(|&(x, y)| x > 20.0 && x < 179.0 && y > 20.0 && y < 179.0);
                if !interior {
                    continue;
                }
                let (vx, vy) = (xs[1].0 - xs[0].0, xs[1].1 - xs[0].1);
                let speed = vx.hypot(vy);
                assert!((1.0 - 1e-9..=3.0 + 1e-9).contains(&speed));
                for t in 2..6 {
                    assert!((xs[t].0 - xs[0].0 - vx * t as f64).abs() < 1e-9);
                    assert!((xs[t].1 - xs[0].1 - vy * t as f64).abs() < 1e-9);
                }
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            sequences: 5,
            noise: 0.05,
            ..SynthSpec::default()
        };
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
    }
}

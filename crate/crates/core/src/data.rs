//! Datasets: IDX and CIFAR-binary readers, synthetic generators, subsetting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from, plus generator facts oracle tests rely on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    /// Class centers of synthetic blobs, flattened per class.
    pub centers: Vec<Vec<f64>>,
    /// Distance from each blob center to the nearest class boundary (before noise).
    pub margin: Option<f64>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    /// Validates the pixel range, label range and non-emptiness.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split, provenance: Provenance) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if labels.is_empty() || images.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one example.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Examples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    fn subset(&self, indices: &[usize], relabel: Option<&[usize]>, classes: usize) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        let labels = match relabel {
            Some(map) => labels.iter().map(|&l| map[l]).collect(),
            None => labels,
        };
        Dataset::new(images, labels, classes, self.split, self.provenance.clone())
    }

    /// Keeps only `keep` classes, relabelled `0..keep.len()` in the given order.
    pub fn select_classes(&self, keep: &[usize]) -> Result<Dataset> {
        let mut map = vec![usize::MAX; self.classes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.classes {
                return Err(Error::InvalidArgument(format!("class {old} outside 0..{}", self.classes)));
            }
            map[old] = new;
        }
        let idx: Vec<usize> = (0..self.len()).filter(|&i| map[self.labels[i]] != usize::MAX).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("no examples of classes {keep:?}")));
        }
        let mut out = self.subset(&idx, Some(&map), keep.len())?;
        out.provenance
            .notes
            .insert("classes".into(), format!("{keep:?}"));
        Ok(out)
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, None, self.classes)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parses an IDX image/label pair (unsigned-byte, big-endian headers).
pub fn parse_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    if images.len() < 16 {
        return Err(Error::Data(format!(
            "IDX image file truncated: expected at least 16 header bytes, found {}",
            images.len()
        )));
    }
    if labels.len() < 8 {
        return Err(Error::Data(format!(
            "IDX label file truncated: expected at least 8 header bytes, found {}",
            labels.len()
        )));
    }
    let magic = be_u32(images, 0);
    if magic != IDX_IMAGES {
        return Err(Error::Data(format!("bad IDX image magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0);
    if magic != IDX_LABELS {
        return Err(Error::Data(format!("bad IDX label magic {magic:#010x}")));
    }
    let (n, h, w) = (
        be_u32(images, 4) as usize,
        be_u32(images, 8) as usize,
        be_u32(images, 12) as usize,
    );
    let nl = be_u32(labels, 4) as usize;
    if n != nl {
        return Err(Error::Data(format!("IDX count mismatch: {n} images, {nl} labels")));
    }
    let expected = 16 + n * h * w;
    if images.len() != expected {
        return Err(Error::Data(format!(
            "IDX image file truncated: expected {expected} bytes, found {}",
            images.len()
        )));
    }
    if labels.len() != 8 + n {
        return Err(Error::Data(format!(
            "IDX label file truncated: expected {} bytes, found {}",
            8 + n,
            labels.len()
        )));
    }
    let pixels = images[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], pixels)?,
        labels,
        classes,
        split,
        Provenance {
            source: "idx".into(),
            ..Default::default()
        },
    )
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let mut ds = parse_idx(&read(images)?, &read(labels)?, split)?;
    ds.provenance.source = format!("idx:{}", images.display());
    Ok(ds)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR binary batches: one label byte then 3072 pixel bytes (R, G, B planes).
pub fn parse_cifar(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR file of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        classes,
        split,
        Provenance {
            source: "cifar-binary".into(),
            ..Default::default()
        },
    )
}

pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let mut ds = parse_cifar(&read(path)?, split)?;
    ds.provenance.source = format!("cifar-binary:{}", path.display());
    Ok(ds)
}

/// Gaussian clusters in `[0, 1]^dims`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    /// Distance between any two class centers.
    pub separation: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

/// Samples `[N, 1, 1, dims]` blobs. Centers sit at `0.5 + (s/√2)·e_c` for an
/// orthonormal set `e_c` (two classes: `0.5 ± (s/2)·u`), so every pair of
/// centers is `s` apart and each center is `s/2` from its decision boundaries.
pub fn synth_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    if spec.per_class == 0 || spec.classes < 2 {
        return Err(Error::InvalidArgument("blobs need at least two non-empty classes".into()));
    }
    if spec.dims == 0 || (spec.classes > 2 && spec.classes > spec.dims) {
        return Err(Error::InvalidArgument(format!(
            "{} dims cannot hold {} orthogonal class directions",
            spec.dims, spec.classes
        )));
    }
    if !(spec.separation > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument("separation must be positive and noise non-negative".into()));
    }
    let mut geo = RngState::derive(spec.seed, &[stream::DATA, 0]);
    let centers: Vec<Vec<f64>> = if spec.classes == 2 {
        let u = geo.unit_vector(spec.dims);
        let h = spec.separation / 2.0;
        vec![
            u.iter().map(|x| 0.5 - h * x).collect(),
            u.iter().map(|x| 0.5 + h * x).collect(),
        ]
    } else {
        // Gram-Schmidt on Gaussian draws
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < spec.classes {
            let mut v = geo.unit_vector(spec.dims);
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= d * c);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let r = spec.separation / 2f64.sqrt();
        basis
            .iter()
            .map(|e| e.iter().map(|x| 0.5 + r * x).collect())
            .collect()
    };
    if centers.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidArgument(format!(
            "separation {} pushes class centers outside [0, 1]",
            spec.separation
        )));
    }
    let tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = RngState::derive(spec.seed, &[stream::DATA, tag]);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        data.extend(
            centers[c]
                .iter()
                .map(|&m| (m + spec.noise * rng.normal()).clamp(0.0, 1.0) as f32),
        );
    }
    Dataset::new(
        Tensor::new(vec![n, 1, 1, spec.dims], data)?,
        labels,
        spec.classes,
        split,
        Provenance {
            source: "synth-blobs".into(),
            seed: Some(spec.seed),
            margin: Some(spec.separation / 2.0),
            centers,
            notes: BTreeMap::from([("noise".into(), spec.noise.to_string())]),
        },
    )
}

/// Ten-class 16×16 stroke glyphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphSpec {
    pub per_class: usize,
    /// Image side length.
    #[serde(default = "default_side")]
    pub side: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_glyph_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_side() -> usize {
    16
}

fn default_glyph_noise() -> f64 {
    0.15
}

// Seven-segment strokes plus the two diagonals on a unit square (x right, y down).
const STROKES: [((f64, f64), (f64, f64)); 9] = [
    ((0.0, 0.0), (1.0, 0.0)), // top
    ((1.0, 0.0), (1.0, 0.5)), // upper right
    ((1.0, 0.5), (1.0, 1.0)), // lower right
    ((0.0, 1.0), (1.0, 1.0)), // bottom
    ((0.0, 0.5), (0.0, 1.0)), // lower left
    ((0.0, 0.0), (0.0, 0.5)), // upper left
    ((0.0, 0.5), (1.0, 0.5)), // middle
    ((0.0, 0.0), (1.0, 1.0)), // falling diagonal
    ((1.0, 0.0), (0.0, 1.0)), // rising diagonal
];

const GLYPHS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 3, 2],
    &[0, 8],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 5, 6, 2],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Renders noisy, randomly placed stroke glyphs (`[N, 1, side, side]`, ten classes).
///
/// Every sample gets its own position, size, slant, stroke width, contrast,
/// pixel noise and a stray stroke with probability one half.
pub fn synth_glyphs(spec: &GlyphSpec, split: Split) -> Result<Dataset> {
    if spec.per_class == 0 || spec.side < 8 {
        return Err(Error::InvalidArgument("glyphs need per_class ≥ 1 and side ≥ 8".into()));
    }
    let tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = RngState::derive(spec.seed, &[stream::DATA, tag]);
    let s = spec.side as f64;
    let n = 10 * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.side * spec.side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c);
        let width = s * rng.uniform(0.30, 0.45);
        let height = s * rng.uniform(0.55, 0.72);
        let x0 = rng.uniform(0.12 * s, s - width - 0.12 * s);
        let y0 = rng.uniform(0.10 * s, s - height - 0.10 * s);
        let slant = rng.uniform(-0.25, 0.25);
        let thick = rng.uniform(0.55, 1.1);
        let ink = rng.uniform(0.6, 1.0);
        let mut strokes: Vec<((f64, f64), (f64, f64))> = GLYPHS[c].iter().map(|&k| STROKES[k]).collect();
        if rng.uniform(0.0, 1.0) < 0.5 {
            let k = rng.below(STROKES.len());
            let (a, b) = STROKES[k];
            let shift = (rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6));
            let frac = rng.uniform(0.25, 0.5);
            let b = (a.0 + frac * (b.0 - a.0), a.1 + frac * (b.1 - a.1));
            strokes.push(((a.0 + shift.0, a.1 + shift.1), (b.0 + shift.0, b.1 + shift.1)));
        }
        let place = |(u, v): (f64, f64)| (x0 + u * width + slant * (0.5 - v) * height, y0 + v * height);
        let placed: Vec<_> = strokes.iter().map(|&(a, b)| (place(a), place(b))).collect();
        for py in 0..spec.side {
            for px in 0..spec.side {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let d = placed
                    .iter()
                    .map(|&(a, b)| segment_distance(p, a, b))
                    .fold(f64::INFINITY, f64::min);
                let v = ink * (1.0 - (d - thick).max(0.0)).clamp(0.0, 1.0);
                data.push((v + spec.noise * rng.normal()).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 1, spec.side, spec.side], data)?,
        labels,
        10,
        split,
        Provenance {
            source: "synth-glyphs".into(),
            seed: Some(spec.seed),
            ..Default::default()
        },
    )
}

/// Equal-per-class subsample: `floor(fraction·N/C)` per class, without replacement.
pub fn stratified_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let per_class = (fraction * ds.len() as f64 / ds.classes as f64).floor() as usize;
    if per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {} examples leaves no example per class",
            ds.len()
        )));
    }
    let mut rng = RngState::derive(seed, &[stream::SUBSET]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(per_class * ds.classes);
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < per_class {
            return Err(Error::Data(format!(
                "class {c} has {} examples, {per_class} required",
                idx.len()
            )));
        }
        rng.shuffle(idx);
        chosen.extend_from_slice(&idx[..per_class]);
    }
    rng.shuffle(&mut chosen);
    let mut out = ds.subset(&chosen, None, ds.classes)?;
    out.provenance
        .notes
        .insert("subset".into(), format!("{fraction} x {} seed {seed}", ds.len()));
    Ok(out)
}

/// Random horizontal flips and zero-padded random crops, in place.
pub fn augment(images: &mut Tensor<f32>, flip: bool, crop_pad: usize, rng: &mut RngState) {
    if !flip && crop_pad == 0 {
        return;
    }
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let row = c * h * w;
    let mut buf = vec![0.0f32; row];
    for img in images.data_mut().chunks_mut(row) {
        let mirror = flip && rng.uniform(0.0, 1.0) < 0.5;
        let (dy, dx) = if crop_pad > 0 {
            let r = 2 * crop_pad + 1;
            (rng.below(r) as isize - crop_pad as isize, rng.below(r) as isize - crop_pad as isize)
        } else {
            (0, 0)
        };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    buf[(ch * h + y) * w + x] = if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&buf);
    }
}

//! Synthetic domain-shift generators and image corruptions.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of tinygrid glyph images.
pub const GRID: usize = 8;
/// Number of distinct tinygrid glyphs.
pub const GLYPHS: usize = 10;
/// Distance of blob centers from the origin.
pub const BLOB_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Moons,
    Blobs,
    Tinygrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    GaussNoise,
    Blur,
    Contrast,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [
        Corruption::GaussNoise,
        Corruption::Blur,
        Corruption::Contrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::None => "none",
            Corruption::GaussNoise => "gauss_noise",
            Corruption::Blur => "blur",
            Corruption::Contrast => "contrast",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Corruption::None),
            "gauss_noise" => Ok(Corruption::GaussNoise),
            "blur" => Ok(Corruption::Blur),
            "contrast" => Ok(Corruption::Contrast),
            other => Err(Error::contract(format!(
                "unknown corruption kind `{other}`"
            ))),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(DatasetKind::Moons),
            "blobs" => Ok(DatasetKind::Blobs),
            "tinygrid" => Ok(DatasetKind::Tinygrid),
            other => Err(Error::contract(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    /// Added to every 2-D point; empty means no translation.
    pub translation: Vec<f64>,
    /// Generator noise: moon jitter, blob spread, or pixel noise.
    pub noise_sigma: f64,
    pub corruption: Corruption,
    pub severity: u8,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation_deg: 0.0,
            translation: Vec::new(),
            noise_sigma: 0.1,
            corruption: Corruption::None,
            severity: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_per_class: usize,
    pub classes: usize,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.shift;
        if self.n_per_class == 0 {
            return Err(Error::contract("n_per_class must be positive"));
        }
        if !(s.noise_sigma >= 0.0) {
            return Err(Error::contract("noise_sigma must be >= 0"));
        }
        if (s.severity == 0) != (s.corruption == Corruption::None) || s.severity > 5 {
            return Err(Error::contract(format!(
                "severity {} does not fit corruption {}",
                s.severity, s.corruption
            )));
        }
        if !(s.translation.is_empty() || s.translation.len() == 2) {
            return Err(Error::contract("translation must have 0 or 2 components"));
        }
        match self.kind {
            DatasetKind::Moons if self.classes != 2 => {
                Err(Error::contract("moons always has 2 classes"))
            }
            DatasetKind::Blobs if self.classes < 2 => {
                Err(Error::contract("blobs needs >= 2 classes"))
            }
            DatasetKind::Tinygrid if !(2..=GLYPHS).contains(&self.classes) => Err(Error::contract(
                format!("tinygrid supports 2..={GLYPHS} classes"),
            )),
            DatasetKind::Tinygrid if s.rotation_deg != 0.0 || !s.translation.is_empty() => Err(
                Error::contract("tinygrid shifts are corruptions, not rotations/translations"),
            ),
            DatasetKind::Moons | DatasetKind::Blobs if s.corruption != Corruption::None => {
                Err(Error::contract("corruptions apply to tinygrid images only"))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample input shape produced by this spec.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Moons | DatasetKind::Blobs => vec![2],
            DatasetKind::Tinygrid => vec![1, GRID, GRID],
        }
    }
}

/// Inputs with class labels aligned by row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledData {
        LabeledData {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Samples a dataset. Pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<LabeledData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_per_class;
    let noise = spec.shift.noise_sigma;
    let mut labels = Vec::with_capacity(n * spec.classes);
    let data = match spec.kind {
        DatasetKind::Moons | DatasetKind::Blobs => {
            let mut pts = Vec::with_capacity(2 * n * spec.classes);
            for c in 0..spec.classes {
                for _ in 0..n {
                    let (x, y) = if spec.kind == DatasetKind::Moons {
                        let t = rng.random_range(0.0..std::f64::consts::PI);
                        if c == 0 {
                            (t.cos(), t.sin())
                        } else {
                            (1.0 - t.cos(), 0.5 - t.sin())
                        }
                    } else {
                        let a = 2.0 * std::f64::consts::PI * c as f64 / spec.classes as f64;
                        (BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin())
                    };
                    let nx: f64 = StandardNormal.sample(&mut rng);
                    let ny: f64 = StandardNormal.sample(&mut rng);
                    pts.push((x + noise * nx, y + noise * ny));
                    labels.push(c);
                }
            }
            let (s, co) = spec.shift.rotation_deg.to_radians().sin_cos();
            let (tx, ty) = match spec.shift.translation[..] {
                [a, b] => (a, b),
                _ => (0.0, 0.0),
            };
            pts.iter()
                .flat_map(|&(x, y)| [x * co - y * s + tx, x * s + y * co + ty])
                .collect::<Vec<_>>()
        }
        DatasetKind::Tinygrid => {
            let mut px = Vec::with_capacity(n * spec.classes * GRID * GRID);
            for c in 0..spec.classes {
                for _ in 0..n {
                    px.extend(glyph_sample(c, noise, &mut rng));
                    labels.push(c);
                }
            }
            px
        }
    };
    let mut shape = vec![labels.len()];
    shape.extend(spec.input_shape());
    let mut inputs = Tensor::new(shape, data)?;
    if spec.shift.corruption != Corruption::None {
        inputs = corrupt(
            &inputs,
            spec.shift.corruption,
            spec.shift.severity,
            spec.seed.wrapping_add(0x5eed),
        )?;
    }
    Ok(LabeledData { inputs, labels })
}

fn glyph_on(class: usize, r: i32, c: i32) -> bool {
    // Glyphs live on a 6x6 canvas; r, c in 0..6.
    match class {
        0 => r == 2 || r == 3,
        1 => c == 2 || c == 3,
        2 => r == c,
        3 => r + c == 5,
        4 => r == 0 || r == 5 || c == 0 || c == 5,
        5 => r == 2 || r == 3 || c == 2 || c == 3,
        6 => r == c || r + c == 5,
        7 => r < 3 && c < 3,
        8 => (r / 2 + c / 2) % 2 == 0,
        _ => {
            let (dr, dc) = (2 * r - 5, 2 * c - 5);
            let d = dr * dr + dc * dc;
            (9..=26).contains(&d)
        }
    }
}

fn glyph_sample<R: Rng + ?Sized>(class: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let oy: i32 = rng.random_range(0..=2);
    let ox: i32 = rng.random_range(0..=2);
    let amp = rng.random_range(0.7..1.0);
    let mut img = vec![0.0; GRID * GRID];
    for y in 0..GRID as i32 {
        for x in 0..GRID as i32 {
            let (r, c) = (y - oy, x - ox);
            let on = (0..6).contains(&r) && (0..6).contains(&c) && glyph_on(class, r, c);
            let n: f64 = StandardNormal.sample(rng);
            let v = if on { amp } else { 0.0 } + noise * n;
            img[(y as usize) * GRID + x as usize] = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// Applies one corruption to a `(B, C, H, W)` image batch.
///
/// Noise std is `0.04 * severity`, blur is a box of width `2 * severity - 1`
/// with edge replication, contrast scales deviations from the per-image mean
/// by `1 - 0.15 * severity`. Results are clamped to the input's value range.
pub fn corrupt(images: &Tensor, kind: Corruption, severity: u8, seed: u64) -> Result<Tensor> {
    if !(1..=5).contains(&severity) {
        return Err(Error::contract(format!(
            "severity must be in 1..=5, got {severity}"
        )));
    }
    if images.rank() != 4 {
        return Err(Error::dim(format!(
            "corrupt expects (B, C, H, W), got {:?}",
            images.shape()
        )));
    }
    let lo = images.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = images
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let s = severity as f64;
    let mut out = images.clone();
    match kind {
        Corruption::None => {
            return Err(Error::contract("corruption `none` has no severity levels"));
        }
        Corruption::GaussNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, 0.04 * s).unwrap();
            for v in out.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        Corruption::Blur => {
            let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
            let r = severity as isize - 1;
            let src = images.data();
            let dst = out.data_mut();
            for plane in 0..images.shape()[0] * c {
                let base = plane * h * w;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = 0.0;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                                acc += src[base + yy * w + xx];
                            }
                        }
                        let width = (2 * r + 1) as f64;
                        dst[base + y as usize * w + x as usize] = acc / (width * width);
                    }
                }
            }
        }
        Corruption::Contrast => {
            let per = images.row_len();
            let factor = 1.0 - 0.15 * s;
            for img in out.data_mut().chunks_exact_mut(per) {
                let mean = img.iter().sum::<f64>() / per as f64;
                for v in img.iter_mut() {
                    *v = mean + (*v - mean) * factor;
                }
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    Ok(out)
}

/// Stratified split: each class contributes `round(fraction * n_c)` samples
/// (at least one on each side) to the first part.
pub fn split_source(
    data: &LabeledData,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledData, LabeledData)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!(
            "fraction must be in (0, 1), got {fraction}"
        )));
    }
    let classes = data.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::contract(format!(
                "class {c} has fewer than 2 samples"
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        hold.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    Ok((data.select(&train), data.select(&hold)))
}

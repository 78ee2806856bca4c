//! Datasets: IDX ingestion, synthetic generators, subsets and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FarError, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How raw `[0, 1]` pixels were mapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Unit,
    /// `2x - 1`, giving `[-1, 1]`.
    Symmetric,
    /// Generated data with its own bounds.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, ...sample_shape]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
    pub scaling: Scaling,
    /// Per-component (low, high) that every value lies in.
    pub bounds: (f64, f64),
}

/// A slice of a dataset ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        self.images.row(i)
    }
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split, scaling: Scaling, bounds: (f64, f64)) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(FarError::Shape(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if bounds.0 >= bounds.1 {
            return Err(FarError::InvalidArgument(format!("data bounds {bounds:?} are empty")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(FarError::InvalidClass { index: bad, classes: class_count });
        }
        if images.data().iter().any(|v| !(bounds.0..=bounds.1).contains(v)) {
            return Err(FarError::InvalidArgument(format!("values outside declared bounds {bounds:?}")));
        }
        Ok(Dataset { images, labels, class_count, split, scaling, bounds })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> (Tensor, usize) {
        (self.images.row(i), self.labels[i])
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let inner: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Dataset {
            images: Tensor::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Tensor::zeros(&[0, 1]),
            labels: Vec::new(),
            class_count: self.class_count,
            split: self.split,
            scaling: self.scaling,
            bounds: self.bounds,
        }
    }

    /// `n` samples chosen by a seeded shuffle. `n == len` keeps the
    /// original order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(FarError::InvalidArgument(format!("subset of {n} from {} samples", self.len())));
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        Ok(self.select(&order))
    }

    /// Shuffled mini-batches; the last one may be smaller.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(FarError::InvalidArgument("batch_size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Batches { data: self, order, batch_size, pos: 0 })
    }

    /// Consecutive unshuffled batches.
    pub fn sequential_batches(&self, batch_size: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(FarError::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(Batches { data: self, order: (0..self.len()).collect(), batch_size, pos: 0 })
    }

    /// Maps `[0, 1]` pixels to `[-1, 1]` via `2x - 1`.
    pub fn to_symmetric(&self) -> Result<Dataset> {
        if self.scaling != Scaling::Unit {
            return Err(FarError::InvalidArgument(format!("cannot rescale {:?} data", self.scaling)));
        }
        Ok(Dataset {
            images: self.images.map(|v| 2.0 * v - 1.0),
            scaling: Scaling::Symmetric,
            bounds: (-1.0, 1.0),
            ..self.clone()
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let part = self.data.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(Batch { images: part.images, labels: part.labels })
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| FarError::Format(format!("{what}: truncated header")))
}

/// Parses IDX image bytes into `[n, rows, cols, 1]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(FarError::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(FarError::Format(format!("images: truncated, {} of {want} pixels", body.len())));
    }
    let data = body[..want].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_parts(vec![n, rows, cols, 1], data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(FarError::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(FarError::Format(format!("labels: truncated, {} of {n} labels", body.len())));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. Files whose name contains `t10k`
/// or `test` are tagged as the test split. The class count is
/// `max(label) + 1`, at least 2.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path.as_ref())?)?;
    if images.shape()[0] != labels.len() {
        return Err(FarError::Format(format!("{} images but {} labels", images.shape()[0], labels.len())));
    }
    let name = images_path.as_ref().file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    let split = if name.contains("t10k") || name.contains("test") { Split::Test } else { Split::Train };
    let class_count = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(images, labels, class_count, split, Scaling::Unit, (0.0, 1.0))
}

/// Encodes `[n, rows, cols, 1]` data in `[0, 1]` as IDX image bytes.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(FarError::Shape(format!("IDX images must be [n, rows, cols, 1], got {s:?}")));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES, s[0] as u32, s[1] as u32, s[2] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two isotropic Gaussians centred at `-+mu * (1, ..., 1) / sqrt(d)`.
    TwoGaussians,
    /// Uniform points in `[0, 1]^d` labelled by the parity of a 4x4 grid
    /// over the first two coordinates.
    Checkerboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dimension: usize,
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_mu() -> f64 {
    3.0
}

fn default_sigma() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn two_gaussians(dimension: usize, samples: usize, seed: u64) -> Self {
        SyntheticSpec { kind: SyntheticKind::TwoGaussians, dimension, samples, seed, mu: default_mu(), sigma: default_sigma() }
    }

    pub fn checkerboard(dimension: usize, samples: usize, seed: u64) -> Self {
        SyntheticSpec { kind: SyntheticKind::Checkerboard, dimension, samples, seed, mu: default_mu(), sigma: default_sigma() }
    }
}

/// Deterministic synthetic two-class data with sample shape `[dimension]`.
///
/// Labels alternate 0, 1, 0, ... so classes are balanced within one.
/// Gaussian samples are clipped to `|v| <= |mu| + 8 sigma`, which is also
/// the declared bound.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.samples == 0 {
        return Err(FarError::InvalidArgument("synthetic dataset needs samples > 0".into()));
    }
    let d = spec.dimension;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(spec.samples * d);
    let bounds = match spec.kind {
        SyntheticKind::TwoGaussians => {
            if d == 0 || spec.sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !spec.mu.is_finite() {
                return Err(FarError::InvalidArgument("two_gaussians needs dimension >= 1, sigma > 0".into()));
            }
            let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
            let centre = spec.mu / (d as f64).sqrt();
            let b = spec.mu.abs() + 8.0 * spec.sigma;
            for &l in &labels {
                let sign = if l == 1 { 1.0 } else { -1.0 };
                data.extend((0..d).map(|_| (sign * centre + noise.sample(&mut rng)).clamp(-b, b)));
            }
            (-b, b)
        }
        SyntheticKind::Checkerboard => {
            if d < 2 {
                return Err(FarError::InvalidArgument("checkerboard needs dimension >= 2".into()));
            }
            for &l in &labels {
                loop {
                    let p: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
                    if checkerboard_label(&p) == l {
                        data.extend(p);
                        break;
                    }
                }
            }
            (0.0, 1.0)
        }
    };
    let images = Tensor::from_parts(vec![spec.samples, d], data);
    Dataset::new(images, labels, 2, Split::Train, Scaling::Synthetic, bounds)
}

/// Cell parity of the first two coordinates on a 4x4 grid over `[0, 1]^2`.
pub fn checkerboard_label(p: &[f64]) -> usize {
    let cell = |v: f64| ((v * 4.0).floor() as i64).clamp(0, 3);
    ((cell(p[0]) + cell(p[1])) % 2) as usize
}

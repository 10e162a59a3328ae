//! Datasets: MNIST IDX files, seeded Gaussian blobs and subset samplers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, SegmentHeader, TAG_DATA};
use crate::error::{Error, Result};
use crate::rng::Stream;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Row-major `n × dim` feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    n_classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} features for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {n_classes})")));
        }
        if let Some(i) = features.iter().position(|v| v.is_nan()) {
            return Err(Error::Domain(format!("NaN feature in row {}", i / dim.max(1))));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            n_classes,
            provenance: provenance.into(),
        })
    }

    /// `n` featureless rows. Useful as the batch argument of objectives that
    /// ignore data, such as closed-form quadratics.
    pub fn placeholder(n: usize) -> Self {
        Dataset {
            features: Vec::new(),
            labels: vec![0; n],
            dim: 0,
            n_classes: 1,
            provenance: "placeholder".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            n_classes: self.n_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Every row except `skip`.
    pub fn without(&self, skip: usize) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| i != skip).collect();
        self.select(&keep)
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            labels,
            self.dim,
            self.n_classes,
            self.provenance.clone(),
        )
    }

    pub fn with_n_classes(mut self, n_classes: usize) -> Result<Dataset> {
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {n_classes})")));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    /// SHA-256 over dimensions, features and labels.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.n_classes as u64).to_le_bytes());
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    /// Writes the dataset cache file (checkpoint container, DATA tag).
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        Container {
            arch_tag: TAG_DATA,
            segments: vec![
                SegmentHeader { name: "features".into(), shape: vec![self.len(), self.dim] },
                SegmentHeader { name: "labels".into(), shape: vec![self.len()] },
                SegmentHeader { name: "n_classes".into(), shape: vec![1] },
            ],
            values: self
                .features
                .iter()
                .copied()
                .chain(self.labels.iter().map(|&y| y as f64))
                .chain(std::iter::once(self.n_classes as f64))
                .collect(),
        }
        .write(path)
    }

    pub fn load_cache(path: &Path) -> Result<Dataset> {
        let c = Container::read(path)?;
        if c.arch_tag != TAG_DATA {
            return Err(Error::Format(format!("arch tag {:#x} is not a dataset", c.arch_tag)));
        }
        let [f, l, k] = c.segments.as_slice() else {
            return Err(Error::Format("dataset cache needs 3 segments".into()));
        };
        if f.name != "features" || l.name != "labels" || k.name != "n_classes" || f.shape.len() != 2 {
            return Err(Error::Format("unexpected dataset cache layout".into()));
        }
        let (n, dim) = (f.shape[0], f.shape[1]);
        if l.shape != [n] {
            return Err(Error::Format("label count disagrees with feature rows".into()));
        }
        let features = c.values[..n * dim].to_vec();
        let labels = c.values[n * dim..n * dim + n].iter().map(|&v| v as usize).collect();
        let n_classes = c.values[n * dim + n] as usize;
        Dataset::new(features, labels, dim, n_classes, format!("cache:{}", path.display()))
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Decodes an IDX image/label pair already in memory. Pixels are scaled by 1/255.
pub fn parse_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image magic expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let dim = rows * cols;
    let pixels = images
        .get(16..16 + n * dim)
        .ok_or_else(|| Error::Format(format!("images: truncated pixel data (need {} bytes)", n * dim)))?;

    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label magic expected {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_labels != n {
        return Err(Error::Format(format!("image/label count mismatch: {n} images, {n_labels} labels")));
    }
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("labels: truncated label data".into()))?;

    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, dim, n_classes, "idx")
}

pub fn parse_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut ds = parse_idx_bytes(&images, &labels)?;
    ds.provenance = format!("idx:{}", images_path.display());
    Ok(ds)
}

/// Encodes a dataset as IDX bytes. Every feature must be an exact multiple of
/// 1/255 in `[0, 1]`, and `rows * cols` must equal the feature width.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::Shape(format!("{rows}×{cols} image for {} features", ds.dim())));
    }
    let mut images = Vec::with_capacity(16 + ds.features.len());
    for v in [IDX_IMAGE_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for &x in &ds.features {
        let p = (x * 255.0).round();
        if !(0.0..=255.0).contains(&p) || p / 255.0 != x {
            return Err(Error::Domain(format!("feature {x} is not a u8 pixel level")));
        }
        images.push(p as u8);
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &y in &ds.labels {
        labels.push(u8::try_from(y).map_err(|_| Error::Domain(format!("label {y} exceeds u8")))?);
    }
    Ok((images, labels))
}

/// `n` points in `d` dimensions from `n_classes` unit-covariance Gaussian
/// clusters. Cluster means sit at distance `separation` from the origin along
/// seeded random unit directions. Classes are balanced (`i mod C` before a
/// seeded shuffle).
pub fn synth_blobs(n: usize, d: usize, n_classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || d == 0 {
        return Err(Error::Config("synth_blobs needs d ≥ 1 and at least 2 classes".into()));
    }
    let mut dirs = Stream::new(seed, "synth/means");
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let mut u: Vec<f64> = (0..d).map(|_| dirs.normal()).collect();
            let norm = crate::linalg::norm(&u).max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|x| *x *= separation / norm);
            u
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    Stream::new(seed, "synth/order").shuffle(&mut labels);
    let mut noise = Stream::new(seed, "synth/noise");
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        for m in &means[y] {
            features.push(m + noise.normal());
        }
    }
    Dataset::new(
        features,
        labels,
        d,
        n_classes,
        format!("blobs(n={n},d={d},C={n_classes},sep={separation},seed={seed})"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SubsetSampler {
    /// Indices `lo..hi`.
    Range { lo: usize, hi: usize },
    /// `k` distinct indices drawn with a seeded stream, ascending.
    SeededWithoutReplacement { k: usize, seed: u64 },
}

impl SubsetSampler {
    pub fn sample(&self, n: usize) -> Result<Vec<usize>> {
        match *self {
            SubsetSampler::Range { lo, hi } => {
                if lo > hi || hi > n {
                    return Err(Error::Config(format!("range {lo}..{hi} not within 0..{n}")));
                }
                Ok((lo..hi).collect())
            }
            SubsetSampler::SeededWithoutReplacement { k, seed } => {
                if k > n {
                    return Err(Error::Config(format!("cannot draw {k} of {n} without replacement")));
                }
                Ok(Stream::new(seed, "sampler").choose_sorted(n, k))
            }
        }
    }
}

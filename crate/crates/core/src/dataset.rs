//! Labeled data: IDX ingestion and export, synthetic Gaussian blobs, and
//! sequences of inputs known to share a class.
//!
//! IDX files are big-endian. Images use magic `0x00000803` followed by the
//! item count, rows and columns (`u32` each) and one unsigned byte per pixel;
//! labels use magic `0x00000801`, the item count and one byte per label.
//! Pixels are scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Number of classes assumed for IDX label files.
pub const IDX_NUM_CLASSES: usize = 10;

/// Inputs stored row-major (one row per item) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Structure(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Structure(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structure("non-finite feature value".into()));
        }
        Ok(LabeledSet {
            features,
            dim,
            labels,
            num_classes,
        })
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Items `start..end` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> LabeledSet {
        let end = end.min(self.len());
        let start = start.min(end);
        LabeledSet {
            features: self.features[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// This set followed by `other`.
    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        if other.dim != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledSet::new(features, self.dim, labels, self.num_classes.max(other.num_classes))
    }

    /// Adds `offset` to every feature.
    pub fn shifted(&self, offset: f64) -> LabeledSet {
        LabeledSet {
            features: self.features.iter().map(|v| v + offset).collect(),
            ..self.clone()
        }
    }

    /// Min-max rescales all features into `[0, 1]` so the set can be written
    /// as IDX bytes.
    pub fn unit_rescaled(&self) -> LabeledSet {
        let lo = self.features.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.features.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        LabeledSet {
            features: self.features.iter().map(|v| (v - lo) / span).collect(),
            ..self.clone()
        }
    }

    pub fn indices_of_class(&self, class_id: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class_id).collect()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let format = |path: &Path, msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if img.len() < 16 {
        return Err(format(images_path, "truncated image header".into()));
    }
    let magic = read_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format(images_path, format!("bad IDX image magic {magic:#010x}")));
    }
    if lab.len() < 8 {
        return Err(format(labels_path, "truncated label header".into()));
    }
    let magic = read_u32(&lab, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format(labels_path, format!("bad IDX label magic {magic:#010x}")));
    }

    let n = read_u32(&img, 4) as usize;
    let rows = read_u32(&img, 8) as usize;
    let cols = read_u32(&img, 12) as usize;
    let n_labels = read_u32(&lab, 4) as usize;
    if n != n_labels {
        return Err(Error::Structure(format!(
            "image count {n} does not match label count {n_labels}"
        )));
    }
    let dim = rows * cols;
    if img.len() != 16 + n * dim {
        return Err(Error::Structure(format!(
            "image payload is {} bytes, header implies {}",
            img.len() - 16,
            n * dim
        )));
    }
    if lab.len() != 8 + n {
        return Err(Error::Structure(format!(
            "label payload is {} bytes, header implies {n}",
            lab.len() - 8
        )));
    }
    let features = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = lab[8..].iter().map(|&b| b as usize).collect();
    LabeledSet::new(features, dim, labels, IDX_NUM_CLASSES)
}

/// Writes a set as an IDX pair. Features must lie in `[0, 1]`; they are
/// quantized to `round(255·x)`. Square inputs are written as `side × side`
/// images, anything else as `1 × dim`.
pub fn write_idx(set: &LabeledSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    if set.num_classes > 256 {
        return Err(Error::Domain("IDX labels hold at most 256 classes".into()));
    }
    if set.features.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(
            "IDX export needs features in [0, 1]; rescale first".into(),
        ));
    }
    let side = (set.dim as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == set.dim {
        (side, side)
    } else {
        (1, set.dim)
    };
    let n = u32::try_from(set.len()).map_err(|_| Error::Domain("too many items for IDX".into()))?;

    let mut img = Vec::with_capacity(16 + set.features.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(set.features.iter().map(|v| (v * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(set.labels.iter().map(|&y| y as u8));

    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Class means: vertices of a regular simplex with edge `separation`,
/// centred at the origin and embedded in the first `num_classes − 1`
/// coordinates.
pub fn blob_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let m = num_classes;
    // Helmert basis of the sum-zero subspace of R^m: u_k has k ones, then -k.
    let scale = separation / std::f64::consts::SQRT_2;
    (0..m)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            for k in 1..m {
                let norm = ((k * (k + 1)) as f64).sqrt();
                let coord = if c < k {
                    1.0
                } else if c == k {
                    -(k as f64)
                } else {
                    0.0
                };
                mean[k - 1] = scale * coord / norm;
            }
            mean
        })
        .collect()
}

/// Isotropic unit-variance Gaussian clouds, one per class, whose means are
/// pairwise `separation` apart. Items are ordered class by class.
pub fn make_blobs(num_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<LabeledSet> {
    if num_classes < 2 {
        return Err(Error::contract("make_blobs needs at least 2 classes"));
    }
    if per_class == 0 {
        return Err(Error::contract("make_blobs needs per_class >= 1"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::contract("separation must be finite and >= 0"));
    }
    if dim + 1 < num_classes {
        return Err(Error::contract(format!(
            "dim {dim} cannot hold {num_classes} equidistant class means (need dim >= {})",
            num_classes - 1
        )));
    }
    let means = blob_means(num_classes, dim, separation);
    let mut r = rng(seed);
    let mut features = vec![0.0; num_classes * per_class * dim];
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for k in 0..per_class {
            let row = &mut features[(c * per_class + k) * dim..(c * per_class + k + 1) * dim];
            fill_standard_normal(&mut r, row);
            for (v, mu) in row.iter_mut().zip(mean) {
                *v += mu;
            }
            labels.push(c);
        }
    }
    LabeledSet::new(features, dim, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    None,
    /// Additive Gaussian noise with standard deviation `sigma` on every feature.
    Noise { sigma: f64 },
    /// Zeroes a seeded rectangle covering `fraction` of a square image, or a
    /// contiguous run of `fraction · dim` features for non-square inputs.
    Erase { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Noise,
    Erase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Corrupted { kind: CorruptionKind, magnitude: f64 },
}

impl Corruption {
    fn validate(&self) -> Result<()> {
        match *self {
            Corruption::None => Ok(()),
            Corruption::Noise { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            Corruption::Erase { fraction } if (0.0..=1.0).contains(&fraction) => Ok(()),
            other => Err(Error::contract(format!("invalid corruption {other:?}"))),
        }
    }

    fn provenance(&self) -> Provenance {
        match *self {
            Corruption::None => Provenance::Original,
            Corruption::Noise { sigma } => Provenance::Corrupted {
                kind: CorruptionKind::Noise,
                magnitude: sigma,
            },
            Corruption::Erase { fraction } => Provenance::Corrupted {
                kind: CorruptionKind::Erase,
                magnitude: fraction,
            },
        }
    }

    fn apply(&self, x: &mut [f64], r: &mut crate::rng::Rng) {
        use rand::Rng as _;
        match *self {
            Corruption::None => {}
            Corruption::Noise { sigma } => {
                let mut noise = vec![0.0; x.len()];
                fill_standard_normal(r, &mut noise);
                for (v, e) in x.iter_mut().zip(noise) {
                    *v += sigma * e;
                }
            }
            Corruption::Erase { fraction } => {
                let dim = x.len();
                let side = (dim as f64).sqrt().round() as usize;
                if side >= 2 && side * side == dim {
                    let edge = ((fraction.sqrt() * side as f64).ceil() as usize).min(side);
                    if edge == 0 {
                        return;
                    }
                    let top = r.random_range(0..=side - edge);
                    let left = r.random_range(0..=side - edge);
                    for row in top..top + edge {
                        x[row * side + left..row * side + left + edge].fill(0.0);
                    }
                } else {
                    let len = ((fraction * dim as f64).ceil() as usize).min(dim);
                    if len == 0 {
                        return;
                    }
                    let start = r.random_range(0..=dim - len);
                    x[start..start + len].fill(0.0);
                }
            }
        }
    }
}

/// Inputs known to belong to one class, with per-element provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    features: Vec<f64>,
    dim: usize,
    true_class: usize,
    provenance: Vec<Provenance>,
    source_indices: Vec<usize>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn true_class(&self) -> usize {
        self.true_class
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Row indices in the source set that each element was drawn from.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn input(&self, l: usize) -> &[f64] {
        &self.features[l * self.dim..(l + 1) * self.dim]
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.features.chunks_exact(self.dim).collect()
    }

    /// Applies `corruption` to element `index` only.
    pub fn corrupt_element(&mut self, index: usize, corruption: Corruption, seed: u64) -> Result<()> {
        corruption.validate()?;
        if index >= self.len() {
            return Err(Error::contract(format!(
                "element {index} out of range for a sequence of {}",
                self.len()
            )));
        }
        let mut r = rng(seed);
        let dim = self.dim;
        corruption.apply(&mut self.features[index * dim..(index + 1) * dim], &mut r);
        self.provenance[index] = corruption.provenance();
        Ok(())
    }
}

/// Samples `length` distinct items of `class_id` and applies `corruption` to
/// each of them.
pub fn build_sequence(
    source: &LabeledSet,
    class_id: usize,
    length: usize,
    corruption: Corruption,
    seed: u64,
) -> Result<InputSequence> {
    corruption.validate()?;
    if length == 0 {
        return Err(Error::contract("sequence length must be >= 1"));
    }
    let pool = source.indices_of_class(class_id);
    if pool.len() < length {
        return Err(Error::Capacity {
            class: class_id,
            requested: length,
            available: pool.len(),
        });
    }
    let mut r = rng(seed);
    let picked: Vec<usize> = sample(&mut r, pool.len(), length)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let dim = source.dim();
    let mut features = Vec::with_capacity(length * dim);
    for &i in &picked {
        let start = features.len();
        features.extend_from_slice(source.input(i));
        corruption.apply(&mut features[start..], &mut r);
    }
    Ok(InputSequence {
        features,
        dim,
        true_class: class_id,
        provenance: vec![corruption.provenance(); length],
        source_indices: picked,
    })
}

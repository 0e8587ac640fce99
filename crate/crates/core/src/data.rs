//! Dataset plumbing: synthetic class blobs, IDX image files, and device
//! partitioning.
//!
//! Everything here is deterministic under a seed so that experiment runs
//! can be reproduced byte for byte.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("feature matrix size {features} is not rows * dim = {rows} * {dim}")]
    BadShape {
        features: usize,
        rows: usize,
        dim: usize,
    },
    #[error("label {label} at row {row} exceeds class count {classes}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("cannot split {samples} samples across {devices} devices")]
    NotEnoughSamples { samples: usize, devices: usize },
    #[error("device count must be at least 1")]
    NoDevices,
    #[error("shards per device must be at least 1")]
    NoShards,
    #[error("could not place {classes} class means at separation {separation} in [0,1]^{dim}")]
    MeansDoNotFit {
        classes: usize,
        separation: f64,
        dim: usize,
    },
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("IDX payload truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("IDX image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// A dense labeled dataset. Features are row-major `len x dim` with
/// every value in `[0, 1]`; labels index `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl LabeledDataset {
    /// # Errors
    ///
    /// The feature buffer must factor as `labels.len() * dim` and every
    /// label must be below `num_classes`.
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.len() != labels.len() * dim {
            return Err(DataError::BadShape {
                features: features.len(),
                rows: labels.len(),
                dim,
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                classes: num_classes,
            });
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
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

    pub fn feature_row(&self, row: usize) -> &[f64] {
        &self.features[row * self.dim..(row + 1) * self.dim]
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the listed rows into a new dataset (a device shard).
    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.feature_row(r));
            labels.push(self.labels[r]);
        }
        LabeledDataset {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

/// Parameters for the synthetic blob generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Minimum pairwise distance between class means.
    pub mean_separation: f64,
    /// Standard deviation of the per-coordinate Gaussian noise around a
    /// class mean, before clipping to `[0, 1]`.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            train_per_class: 600,
            test_per_class: 150,
            input_dim: 16,
            mean_separation: 1.0,
            noise_std: 0.12,
        }
    }
}

/// Draws class means in `[0.15, 0.85]^dim` at the requested pairwise
/// separation, then samples clipped Gaussian blobs around them. Returns
/// the train and test splits, each class-blocked in class order.
///
/// # Errors
///
/// Gives up when the means cannot be placed after a bounded number of
/// rejection rounds (separation too large for the cube).
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = place_means(spec, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_std).expect("noise_std must be finite and >= 0");

    let sample = |mean: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        mean.iter()
            .map(|&m| (m + noise.sample(rng)).clamp(0.0, 1.0))
            .collect()
    };

    let mut train_features =
        Vec::with_capacity(spec.classes * spec.train_per_class * spec.input_dim);
    let mut train_labels = Vec::with_capacity(spec.classes * spec.train_per_class);
    let mut test_features = Vec::with_capacity(spec.classes * spec.test_per_class * spec.input_dim);
    let mut test_labels = Vec::with_capacity(spec.classes * spec.test_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.train_per_class {
            train_features.extend(sample(mean, &mut rng));
            train_labels.push(class);
        }
        for _ in 0..spec.test_per_class {
            test_features.extend(sample(mean, &mut rng));
            test_labels.push(class);
        }
    }
    let train = LabeledDataset::new(train_features, train_labels, spec.input_dim, spec.classes)?;
    let test = LabeledDataset::new(test_features, test_labels, spec.input_dim, spec.classes)?;
    Ok((train, test))
}

fn place_means(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, DataError> {
    const MAX_ATTEMPTS: usize = 10_000;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut attempts = 0;
    while means.len() < spec.classes {
        if attempts >= MAX_ATTEMPTS {
            return Err(DataError::MeansDoNotFit {
                classes: spec.classes,
                separation: spec.mean_separation,
                dim: spec.input_dim,
            });
        }
        attempts += 1;
        let candidate: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.random_range(0.15..0.85))
            .collect();
        let far_enough = means.iter().all(|m| {
            let d2: f64 = m
                .iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() >= spec.mean_separation
        });
        if far_enough {
            means.push(candidate);
        }
    }
    Ok(means)
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses a pair of IDX files (big-endian, pre-extracted) into a
/// dataset. Pixels are scaled to `[0, 1]` by `/ 255`; the class count is
/// `max label + 1`.
///
/// # Errors
///
/// Checks both magics, payload sizes, and that the image and label
/// counts agree.
pub fn load_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset, DataError> {
    let image_magic = read_be_u32(images, 0)?;
    if image_magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            got: image_magic,
        });
    }
    let count = read_be_u32(images, 4)? as usize;
    let rows = read_be_u32(images, 8)? as usize;
    let cols = read_be_u32(images, 12)? as usize;
    let dim = rows * cols;
    let needed = 16 + count * dim;
    if images.len() < needed {
        return Err(DataError::Truncated {
            needed,
            got: images.len(),
        });
    }

    let label_magic = read_be_u32(labels, 0)?;
    if label_magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABEL_MAGIC,
            got: label_magic,
        });
    }
    let label_count = read_be_u32(labels, 4)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let label_needed = 8 + count;
    if labels.len() < label_needed {
        return Err(DataError::Truncated {
            needed: label_needed,
            got: labels.len(),
        });
    }

    let features: Vec<f64> = images[16..needed]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let parsed_labels: Vec<usize> = labels[8..label_needed]
        .iter()
        .map(|&l| l as usize)
        .collect();
    let num_classes = parsed_labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, parsed_labels, dim, num_classes)
}

/// Serializes a dataset into a pair of IDX buffers (images, labels),
/// quantizing features back to bytes with round-to-nearest. The feature
/// dimension is written as a `dim x 1` image shape.
pub fn write_idx(data: &LabeledDataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + data.len() * data.dim());
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(data.len() as u32).to_be_bytes());
    images.extend_from_slice(&(data.dim() as u32).to_be_bytes());
    images.extend_from_slice(&1u32.to_be_bytes());
    for row in 0..data.len() {
        for &v in data.feature_row(row) {
            images.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels().iter().map(|&l| l as u8));
    (images, labels)
}

/// How training rows are spread across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionSpec {
    /// Seeded permutation cut into contiguous near-equal chunks.
    Iid,
    /// Sort by label, cut into `devices * shards_per_device` near-equal
    /// shards, deal each device `shards_per_device` of them at random.
    /// Small shard counts concentrate few labels per device.
    LabelSkew { shards_per_device: usize },
}

/// Splits `0..labels.len()` into one index shard per device.
///
/// Every row lands in exactly one shard. Chunk sizes differ by at most
/// one; under `LabelSkew` that holds per shard, so device totals differ
/// by at most `shards_per_device`.
///
/// # Errors
///
/// Needs at least one row per device (and per shard under `LabelSkew`).
pub fn partition(
    labels: &[usize],
    devices: usize,
    spec: PartitionSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if devices == 0 {
        return Err(DataError::NoDevices);
    }
    let n = labels.len();
    if n < devices {
        return Err(DataError::NotEnoughSamples {
            samples: n,
            devices,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        PartitionSpec::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            Ok(chunk_even(&order, devices))
        }
        PartitionSpec::LabelSkew { shards_per_device } => {
            if shards_per_device == 0 {
                return Err(DataError::NoShards);
            }
            let shard_count = devices * shards_per_device;
            if n < shard_count {
                return Err(DataError::NotEnoughSamples {
                    samples: n,
                    devices: shard_count,
                });
            }
            let mut order: Vec<usize> = (0..n).collect();
            // Stable by construction: sort_by_key on (label, index).
            order.sort_by_key(|&i| (labels[i], i));
            let mut shards = chunk_even(&order, shard_count);
            let mut deal: Vec<usize> = (0..shard_count).collect();
            deal.shuffle(&mut rng);
            let mut result = vec![Vec::new(); devices];
            for (slot, &shard_idx) in deal.iter().enumerate() {
                result[slot / shards_per_device].append(&mut shards[shard_idx]);
            }
            Ok(result)
        }
    }
}

/// Cuts a slice into `parts` contiguous chunks whose sizes differ by at
/// most one (the first `len % parts` chunks get the extra row).
fn chunk_even(order: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = order.len() / parts;
    let extra = order.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

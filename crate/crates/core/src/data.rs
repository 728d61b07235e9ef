//! Datasets (MNIST IDX files and synthetic Gaussian blobs) and the non-IID,
//! class-imbalanced client partition.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

/// Labelled samples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rows != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                inputs.rows,
                labels.len()
            )));
        }
        if labels.len() < class_count {
            return Err(Error::InvalidInput(format!(
                "dataset has {} samples, fewer than its {class_count} classes",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if inputs.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Sample count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            field: field.to_string(),
            reason: "file truncated in header".into(),
        })
}

/// Parses an IDX image file body; returns `(count, rows*cols, pixels)`.
fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images.magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            field: "images.magic".into(),
            reason: format!("expected 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_u32(bytes, 4, "images.count")? as usize;
    let rows = read_u32(bytes, 8, "images.rows")? as usize;
    let cols = read_u32(bytes, 12, "images.cols")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * dim {
        return Err(Error::Format {
            field: "images.pixels".into(),
            reason: format!(
                "header declares {count} images of {rows}x{cols} ({} bytes), file holds {}",
                count * dim,
                body.len()
            ),
        });
    }
    Ok((count, dim, &body[..count * dim]))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels.magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            field: "labels.magic".into(),
            reason: format!("expected 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_u32(bytes, 4, "labels.count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            field: "labels.values".into(),
            reason: format!("header declares {count} labels, file holds {}", body.len()),
        });
    }
    Ok(&body[..count])
}

/// Decodes an in-memory pair of IDX image/label files.
pub fn decode_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::Format {
            field: "labels.count".into(),
            reason: format!(
                "{} labels but {count} images",
                label_bytes.len()
            ),
        });
    }
    if let Some(bad) = label_bytes.iter().find(|&&y| y as usize >= MNIST_CLASSES) {
        return Err(Error::Format {
            field: "labels.values".into(),
            reason: format!("label {bad} outside 0..=9"),
        });
    }
    let inputs = Matrix {
        rows: count,
        cols: dim,
        data: pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    };
    let labels = label_bytes.iter().map(|&y| y as usize).collect();
    Dataset::new(inputs, labels, MNIST_CLASSES).map_err(|e| Error::Format {
        field: "dataset".into(),
        reason: e.to_string(),
    })
}

/// Reads an MNIST image/label file pair.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_mnist(&images, &labels)
}

/// Center of class `class` on a regular lattice in `[0,1]^dim`.
///
/// The class index is written in base `levels` using `digits` digits, and
/// axis `j` carries digit `j mod digits`, so spare axes repeat the code.
/// `levels` is 2 when `2^dim >= class_count`, otherwise the smallest value
/// with `levels^dim >= class_count`.
pub fn lattice_mean(class: usize, class_count: usize, dim: usize) -> Vec<f64> {
    let fits = |levels: usize, digits: usize| {
        (levels as f64).powi(digits as i32) >= class_count as f64
    };
    let (levels, digits) = if fits(2, dim) {
        let mut digits = 1;
        while !fits(2, digits) {
            digits += 1;
        }
        (2, digits)
    } else {
        let mut levels = 3;
        while !fits(levels, dim) {
            levels += 1;
        }
        (levels, dim)
    };
    let code: Vec<usize> = (0..digits)
        .scan(class, |rest, _| {
            let d = *rest % levels;
            *rest /= levels;
            Some(d)
        })
        .collect();
    (0..dim)
        .map(|j| (code[j % digits] as f64 + 0.5) / levels as f64)
        .collect()
}

/// Isotropic Gaussian blobs around lattice points, clipped to `[0, 1]`.
/// Samples are ordered class by class.
pub fn gen_synthetic(
    class_count: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs class_count >= 2, dim >= 1, per_class >= 1 \
             (got {class_count}, {dim}, {per_class})"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "synthetic spread must be positive, got {spread}"
        )));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        let mean = lattice_mean(c, class_count, dim);
        for _ in 0..per_class {
            data.extend(
                mean.iter()
                    .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            );
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, class_count)
}

/// Stratified split: from every class a seeded `test_fraction` of samples goes
/// to the test set. Returns `(train, test)`.
pub fn split_holdout(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..dataset.class_count {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == c)
            .collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let (te, tr) = idx.split_at(n_test);
        test.extend_from_slice(te);
        train.extend_from_slice(tr);
    }
    train.sort_unstable();
    test.sort_unstable();
    if test.is_empty() || train.is_empty() {
        return Err(Error::InvalidConfig("holdout split left an empty side".into()));
    }
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Per-client sample indices into one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    /// Shard length actually used (after clamping).
    pub shard_size: usize,
    pub shard_clients: usize,
    pub majority_class: usize,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Distinct labels held by one client, ascending.
    pub fn client_labels(&self, dataset: &Dataset, client: usize) -> Vec<usize> {
        let mut labels: Vec<usize> = self.clients[client]
            .iter()
            .map(|&i| dataset.labels[i])
            .collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Non-IID, class-imbalanced partition.
///
/// All samples of `majority_class` are reserved and dealt as evenly as
/// possible to the last `client_count - shard_clients` clients. The remaining
/// samples are ordered by label and cut into contiguous shards of
/// `shard_size`; shard `i` goes to client `i`. Leftover samples stay
/// unassigned. If `shard_size` does not fit it is reduced to the largest
/// feasible size and a warning is logged.
pub fn partition_noniid(
    dataset: &Dataset,
    client_count: usize,
    shard_clients: usize,
    shard_size: usize,
    majority_class: usize,
    seed: u64,
) -> Result<Partition> {
    let majority_clients = client_count.saturating_sub(shard_clients);
    let majority_samples = dataset
        .labels
        .iter()
        .filter(|&&y| y == majority_class)
        .count();
    let infeasible = |reason: String| Error::PartitionInfeasible {
        reason,
        samples: dataset.len(),
        majority_samples,
        client_count,
        shard_clients,
    };
    if client_count == 0 || shard_clients > client_count {
        return Err(infeasible(
            "need 0 <= shard_clients <= client_count and client_count >= 1".into(),
        ));
    }
    if majority_class >= dataset.class_count {
        return Err(infeasible(format!(
            "majority class {majority_class} not among {} classes",
            dataset.class_count
        )));
    }
    if shard_clients > 0 && shard_size == 0 {
        return Err(infeasible("shard_size must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let mut clients = vec![Vec::new(); client_count];

    let rest: Vec<usize> = if majority_clients > 0 {
        if majority_samples < majority_clients {
            return Err(infeasible(format!(
                "{majority_samples} majority-class samples cannot cover {majority_clients} clients"
            )));
        }
        let reserved: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| dataset.labels[i] == majority_class)
            .collect();
        let base = reserved.len() / majority_clients;
        let extra = reserved.len() % majority_clients;
        let mut start = 0;
        for m in 0..majority_clients {
            let len = base + usize::from(m < extra);
            clients[shard_clients + m] = reserved[start..start + len].to_vec();
            start += len;
        }
        order
            .into_iter()
            .filter(|&i| dataset.labels[i] != majority_class)
            .collect()
    } else {
        order
    };

    let mut effective = shard_size;
    if shard_clients > 0 {
        let mut sorted = rest;
        // stable: keeps the seeded order within each label
        sorted.sort_by_key(|&i| dataset.labels[i]);
        let max_size = sorted.len() / shard_clients;
        if max_size == 0 {
            return Err(infeasible(format!(
                "{} non-reserved samples cannot fill {shard_clients} shards",
                sorted.len()
            )));
        }
        if shard_size > max_size {
            log::warn!(
                "shard_size {shard_size} infeasible with {} non-reserved samples over {shard_clients} \
                 shard clients; clamped to {max_size}",
                sorted.len()
            );
            effective = max_size;
        }
        for (i, client) in clients.iter_mut().take(shard_clients).enumerate() {
            *client = sorted[i * effective..(i + 1) * effective].to_vec();
        }
    }

    Ok(Partition {
        clients,
        shard_size: effective,
        shard_clients,
        majority_class,
    })
}

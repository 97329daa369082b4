//! Datasets, the IDX file format, and per-epoch sharding across workers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, IdxError, Result};
use crate::linalg::{Matrix, Vector};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored as columns of `inputs`, one label per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        check_len("Dataset labels", inputs.cols(), labels.len())?;
        if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                sample,
                label,
                classes,
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> usize {
        self.inputs.rows()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, index: usize) -> &[f64] {
        self.inputs.column(index)
    }

    /// Keeps the first `limit` samples.
    pub fn truncated(&self, limit: usize) -> Dataset {
        let keep = limit.min(self.len());
        let data = self.inputs.as_col_major()[..keep * self.features()].to_vec();
        Dataset {
            inputs: Matrix::from_col_major(self.features(), keep, data)
                .expect("prefix of a valid matrix"),
            labels: self.labels[..keep].to_vec(),
            classes: self.classes,
        }
    }
}

/// Reads an IDX image file and its IDX label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

/// Parses IDX bytes. Pixels are scaled by `1/255`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let header = read_header(images, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (header[0], header[1], header[2]);
    let features = rows * cols;
    let pixels = payload(images, 16, count * features)?;

    let header = read_header(labels, LABELS_MAGIC, 1)?;
    let label_count = header[0];
    let label_bytes = payload(labels, 8, label_count)?;

    if count != label_count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        }
        .into());
    }

    let inputs = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(0, |&l| l + 1);
    Dataset::new(
        Matrix::from_col_major(features, count, inputs)?,
        labels,
        classes,
    )
}

fn read_header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let needed = 4 * (dims + 1);
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        }
        .into());
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let found = word(0);
    if found != magic {
        return Err(IdxError::BadMagic {
            expected: magic,
            found,
        }
        .into());
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let needed = offset + len;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        }
        .into());
    }
    Ok(&bytes[offset..needed])
}

/// Serializes a dataset as `(images, labels)` IDX bytes.
///
/// Inputs are quantized to `round(255 v)`; 784-feature samples are written as
/// 28 × 28 images, anything else as `features × 1`.
pub fn to_idx_bytes(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let features = dataset.features();
    let (rows, cols) = if features == 784 {
        (28, 28)
    } else {
        (features, 1)
    };
    let count = dataset.len();
    let mut images = Vec::with_capacity(16 + count * features);
    for word in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&word.to_be_bytes());
    }
    for &v in dataset.inputs().as_col_major() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "IDX pixels must lie in [0, 1], found {v}"
            )));
        }
        images.push((v * 255.0).round() as u8);
    }

    let mut labels = Vec::with_capacity(8 + count);
    for word in [LABELS_MAGIC, count as u32] {
        labels.extend_from_slice(&word.to_be_bytes());
    }
    for &l in dataset.labels() {
        let byte = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?;
        labels.push(byte);
    }
    Ok((images, labels))
}

/// Gaussian clusters, one per class, with unit noise around centers at
/// distance 4 from the origin. Labels cycle through the classes.
pub fn synthetic_blobs(
    features: usize,
    classes: usize,
    samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if features == 0 || classes == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "synthetic_blobs needs positive features, classes and samples".into(),
        ));
    }
    const RADIUS: f64 = 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vector> = (0..classes)
        .map(|_| {
            let mut c: Vector = (0..features).map(|_| gaussian(&mut rng)).collect();
            let len = c.norm().max(f64::MIN_POSITIVE);
            c.iter_mut().for_each(|x| *x *= RADIUS / len);
            c
        })
        .collect();

    let mut inputs = Matrix::zeros(features, samples);
    let mut labels = Vec::with_capacity(samples);
    for s in 0..samples {
        let label = s % classes;
        for (x, c) in inputs.column_mut(s).iter_mut().zip(centers[label].iter()) {
            *x = c + gaussian(&mut rng);
        }
        labels.push(label);
    }
    Dataset::new(inputs, labels, classes)
}

/// Zero-mean Gaussian vectors used as per-sample gradient perturbations for
/// the analytic objectives. Columns are re-centered so the full-dataset mean
/// is zero up to rounding.
pub fn noise_dataset(dim: usize, samples: usize, scale: f64, seed: u64) -> Result<Dataset> {
    if dim == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "noise_dataset needs positive dim and samples".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Matrix::zeros(dim, samples);
    for s in 0..samples {
        inputs
            .column_mut(s)
            .iter_mut()
            .for_each(|x| *x = scale * gaussian(&mut rng));
    }
    let mut mean = vec![0.0; dim];
    for col in inputs.columns() {
        mean.iter_mut().zip(col).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= samples as f64);
    for s in 0..samples {
        inputs
            .column_mut(s)
            .iter_mut()
            .zip(&mean)
            .for_each(|(x, m)| *x -= m);
    }
    Dataset::new(inputs, vec![0; samples], 1)
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Assignment of samples to workers for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    pub m: usize,
    pub epoch_seed: u64,
    /// Worker index for each sample.
    pub assignment: Vec<usize>,
    shards: Vec<Vec<usize>>,
}

impl ShardPlan {
    /// Sample indices of worker `k`, in the order the worker consumes them.
    pub fn shard(&self, worker: usize) -> &[usize] {
        &self.shards[worker]
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

/// Seeded permutation of the samples dealt round-robin to `m` workers.
pub fn shard(sample_count: usize, m: usize, epoch_seed: u64) -> Result<ShardPlan> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "shard needs at least one worker".into(),
        ));
    }
    let mut order: Vec<usize> = (0..sample_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

    let mut assignment = vec![0; sample_count];
    let mut shards = vec![Vec::with_capacity(sample_count / m + 1); m];
    for (pos, &sample) in order.iter().enumerate() {
        let worker = pos % m;
        assignment[sample] = worker;
        shards[worker].push(sample);
    }
    Ok(ShardPlan {
        m,
        epoch_seed,
        assignment,
        shards,
    })
}

/// Splits the global batch over `m` workers; the remainder goes to the
/// lowest-index workers.
pub fn worker_batch_sizes(global_batch: usize, m: usize) -> Vec<usize> {
    (0..m)
        .map(|k| global_batch / m + usize::from(k < global_batch % m))
        .collect()
}

//! Datasets: MNIST IDX files, the generated two-dimensional toy set, and
//! per-channel normalization bookkeeping.

mod idx;
mod toy;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use idx::{load_idx, load_mnist, parse_idx_images, parse_idx_labels, MnistSplit};
pub use toy::{conflicting_pairs, generate_toy, ToySpec, DEFAULT_TOY_SEED};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("input value {0} outside [0, 1]")]
    InputRange(f64),
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("normalization record has {got} channels, data has {expected}")]
    Channels { expected: usize, got: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid toy specification: {0}")]
    ToySpec(String),
    #[error("rejection sampling gave up after {0} draws")]
    RetryBudget(usize),
    #[error("cannot find MNIST files in {0}")]
    MissingMnist(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Per-channel statistics and whether they have been applied to the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub applied: bool,
}

impl NormalizationRecord {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            applied: false,
        }
    }

    /// Radius in normalized units, per channel, for a pixel-space radius.
    pub fn normalized_epsilon(&self, epsilon: f64) -> Vec<f64> {
        self.std.iter().map(|s| epsilon / s).collect()
    }
}

/// Labeled examples stored as one `[N, ..]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    normalization: NormalizationRecord,
    provenance: String,
}

/// JSON summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: String,
    pub count: usize,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub label_counts: Vec<usize>,
    pub normalization: NormalizationRecord,
}

impl Dataset {
    /// Unnormalized dataset; inputs must lie in `[0, 1]`.
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, provenance: impl Into<String>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if inputs.shape().len() < 2 {
            return Err(TensorError::Rank {
                op: "dataset",
                expected: 2,
                shape: inputs.shape().to_vec(),
            }
            .into());
        }
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::LabelRange {
                label,
                classes: class_count,
            });
        }
        if let Some(&v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InputRange(v));
        }
        let channels = if inputs.shape().len() == 4 { inputs.shape()[1] } else { 1 };
        Ok(Self {
            inputs,
            labels,
            class_count,
            normalization: NormalizationRecord::identity(channels),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> &NormalizationRecord {
        &self.normalization
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Shape of one example.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Number of channels (1 for non-image data).
    pub fn channels(&self) -> usize {
        self.normalization.mean.len()
    }

    /// Example `i` with a leading batch axis of 1.
    pub fn example(&self, i: usize) -> Tensor {
        self.inputs.rows(i, i + 1).expect("index in range")
    }

    /// Inputs and labels for the given example indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.inputs.select_rows(indices).expect("indices in range");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// New dataset holding the given examples.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (inputs, labels) = self.batch(indices);
        Self {
            inputs,
            labels,
            class_count: self.class_count,
            normalization: self.normalization.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` examples (all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            provenance: self.provenance.clone(),
            count: self.len(),
            input_shape: self.input_shape().to_vec(),
            class_count: self.class_count,
            label_counts: self.label_counts(),
            normalization: self.normalization.clone(),
        }
    }

    fn channel_of(&self, flat_index: usize) -> usize {
        if self.inputs.shape().len() == 4 {
            let s = self.inputs.shape();
            (flat_index / (s[2] * s[3])) % s[1]
        } else {
            0
        }
    }
}

/// Per-channel mean and (population) standard deviation of the inputs.
pub fn channel_stats(ds: &Dataset) -> Result<NormalizationRecord> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let c = ds.channels();
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for (i, v) in ds.inputs.data().iter().enumerate() {
        let ch = ds.channel_of(i);
        sum[ch] += v;
        count[ch] += 1;
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / *n as f64).collect();
    let mut var = vec![0.0; c];
    for (i, v) in ds.inputs.data().iter().enumerate() {
        let ch = ds.channel_of(i);
        var[ch] += (v - mean[ch]).powi(2);
    }
    let std = var.iter().zip(&count).map(|(s, n)| (s / *n as f64).sqrt()).collect();
    Ok(NormalizationRecord {
        mean,
        std,
        applied: false,
    })
}

/// Applies `(x - mean) / std` per channel. Statistics default to the
/// dataset's own; pass the training split's record when normalizing a test
/// split.
pub fn normalize(ds: &Dataset, stats: Option<&NormalizationRecord>) -> Result<Dataset> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => channel_stats(ds)?,
    };
    if stats.mean.len() != ds.channels() || stats.std.len() != ds.channels() {
        return Err(DataError::Channels {
            expected: ds.channels(),
            got: stats.mean.len().min(stats.std.len()),
        });
    }
    if let Some(ch) = stats.std.iter().position(|s| *s == 0.0) {
        return Err(DataError::ZeroStd(ch));
    }
    let data: Vec<f64> = ds
        .inputs
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = ds.channel_of(i);
            (v - stats.mean[ch]) / stats.std[ch]
        })
        .collect();
    let mut out = ds.clone();
    out.inputs = Tensor::new(ds.inputs.shape().to_vec(), data)?;
    out.normalization = NormalizationRecord { applied: true, ..stats };
    Ok(out)
}

/// Inverse of [`normalize`]; a no-op when no normalization was applied.
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    if !ds.normalization.applied {
        return Ok(ds.clone());
    }
    let stats = &ds.normalization;
    let data: Vec<f64> = ds
        .inputs
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = ds.channel_of(i);
            v * stats.std[ch] + stats.mean[ch]
        })
        .collect();
    let mut out = ds.clone();
    out.inputs = Tensor::new(ds.inputs.shape().to_vec(), data)?;
    out.normalization.applied = false;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images() -> Dataset {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i % 7) as f64 / 7.0).collect();
        Dataset::new(Tensor::new(vec![2, 3, 2, 2], data).unwrap(), vec![0, 1], 2, "test").unwrap()
    }

    #[test]
    fn identity_stats_leave_data_unchanged() {
        let ds = images();
        let out = normalize(&ds, Some(&NormalizationRecord::identity(3))).unwrap();
        assert_eq!(out.inputs(), ds.inputs());
        assert!(out.normalization().applied);
    }

    #[test]
    fn round_trip() {
        let ds = images();
        let back = denormalize(&normalize(&ds, None).unwrap()).unwrap();
        assert!(back.inputs().max_abs_diff(ds.inputs()).unwrap() < 1e-12);
    }

    #[test]
    fn epsilon_conversion() {
        let rec = NormalizationRecord {
            mean: vec![0.5],
            std: vec![0.25],
            applied: true,
        };
        assert_eq!(rec.normalized_epsilon(2.0 / 255.0), vec![(2.0 / 255.0) / 0.25]);
    }

    #[test]
    fn zero_std_rejected() {
        let ds = Dataset::new(Tensor::full(&[2, 2], 0.5), vec![0, 0], 1, "flat").unwrap();
        assert!(matches!(normalize(&ds, None), Err(DataError::ZeroStd(0))));
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(
            Dataset::new(Tensor::zeros(&[2, 2]), vec![0], 2, ""),
            Err(DataError::CountMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new(Tensor::zeros(&[1, 2]), vec![3], 2, ""),
            Err(DataError::LabelRange { .. })
        ));
        assert!(matches!(
            Dataset::new(Tensor::full(&[1, 2], 1.5), vec![0], 2, ""),
            Err(DataError::InputRange(_))
        ));
    }
}

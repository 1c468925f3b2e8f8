//! Datasets, vertical partitioning and backdoor trigger marking.

mod idx;
mod partition;
mod synth;
mod trigger;

pub use idx::{load_idx_images, load_idx_labels, load_mnist};
pub use partition::{vertical_split, PartitionSpec};
pub use synth::synth_blobs;
pub use trigger::{apply_trigger, choose_ids, select_targets, TriggerCell, TriggerKind, TriggerSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { path: String, offset: usize, needed: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid trigger: {0}")]
    Trigger(String),
    #[error("class {class} has {available} clean samples, {requested} requested")]
    InsufficientClass {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled samples with features in `[0, 1]` and a trigger mark per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    trigger_mask: Vec<bool>,
    /// `(rows, cols)` when features are a row-major image.
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, DataError> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "features {:?} vs {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {bad} outside [0, {classes})")));
        }
        if features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("features must lie in [0, 1]".into()));
        }
        let n = labels.len();
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
            trigger_mask: vec![false; n],
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self, DataError> {
        if rows * cols != self.dim() {
            return Err(DataError::Invalid(format!(
                "image {rows}x{cols} does not match feature dim {}",
                self.dim()
            )));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn trigger_mask(&self) -> &[bool] {
        &self.trigger_mask
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn triggered_ids(&self) -> Vec<usize> {
        self.trigger_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn clean_ids(&self) -> Vec<usize> {
        self.trigger_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }

    /// Keeps the listed samples, in order.
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            trigger_mask: ids.iter().map(|&i| self.trigger_mask[i]).collect(),
            image_shape: self.image_shape,
        }
    }

    /// First `n` samples (or all, when fewer).
    pub fn truncate(&self, n: usize) -> Dataset {
        let ids: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&ids)
    }

    /// Seeded shuffle, then the first `test_fraction` of samples become the test split.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let mut test = self.subset(&ids[..n_test]);
        test.split = Split::Test;
        let mut train = self.subset(&ids[n_test..]);
        train.split = Split::Train;
        (train, test)
    }

    pub(crate) fn features_mut(&mut self) -> &mut Tensor {
        &mut self.features
    }

    pub(crate) fn mark(&mut self, id: usize) {
        self.trigger_mask[id] = true;
    }
}

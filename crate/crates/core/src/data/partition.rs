use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::numerics::Tensor;

/// Feature ownership: party `k` owns the union of `parts[k]`, in range order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    parts: Vec<Vec<Range<usize>>>,
}

impl PartitionSpec {
    pub fn new(parts: Vec<Vec<Range<usize>>>) -> Self {
        PartitionSpec { parts }
    }

    /// `k` contiguous, near-equal blocks of `0..d`.
    pub fn contiguous(d: usize, k: usize) -> Self {
        let parts = (0..k).map(|p| vec![p * d / k..(p + 1) * d / k]).collect();
        PartitionSpec { parts }
    }

    /// Splits a row-major `rows x cols` image into `k` vertical strips of
    /// columns; party 0 gets the leftmost strip.
    pub fn image_columns(rows: usize, cols: usize, k: usize) -> Self {
        let parts = (0..k)
            .map(|p| {
                let (c0, c1) = (p * cols / k, (p + 1) * cols / k);
                (0..rows).map(|r| r * cols + c0..r * cols + c1).collect()
            })
            .collect();
        PartitionSpec { parts }
    }

    pub fn parties(&self) -> usize {
        self.parts.len()
    }

    pub fn ranges(&self, party: usize) -> &[Range<usize>] {
        &self.parts[party]
    }

    /// Flat feature indices owned by `party`.
    pub fn indices(&self, party: usize) -> Vec<usize> {
        self.parts[party].iter().cloned().flatten().collect()
    }

    pub fn owner_of(&self, feature: usize) -> Option<usize> {
        self.parts
            .iter()
            .position(|rs| rs.iter().any(|r| r.contains(&feature)))
    }

    /// Checks disjointness and coverage of `0..d`.
    pub fn validate(&self, d: usize) -> Result<(), DataError> {
        if self.parts.len() < 2 {
            return Err(DataError::Partition(format!(
                "need at least 2 parties, got {}",
                self.parts.len()
            )));
        }
        let mut owner = vec![None; d];
        for (p, ranges) in self.parts.iter().enumerate() {
            for r in ranges {
                if r.end > d || r.start > r.end {
                    return Err(DataError::Partition(format!(
                        "party {p} range {r:?} outside 0..{d}"
                    )));
                }
                for f in r.clone() {
                    if let Some(q) = owner[f] {
                        return Err(DataError::Partition(format!(
                            "feature {f} assigned to parties {q} and {p}"
                        )));
                    }
                    owner[f] = Some(p);
                }
            }
            if ranges.iter().all(|r| r.is_empty()) {
                return Err(DataError::Partition(format!("party {p} owns no features")));
            }
        }
        if let Some(gap) = owner.iter().position(Option::is_none) {
            return Err(DataError::Partition(format!("feature {gap} is not assigned")));
        }
        Ok(())
    }

    /// Inverse of [`vertical_split`].
    pub fn merge(&self, views: &[Tensor]) -> Result<Tensor, DataError> {
        if views.len() != self.parts.len() {
            return Err(DataError::Partition("view count differs from party count".into()));
        }
        let n = views.first().map_or(0, Tensor::rows);
        let d: usize = (0..self.parts.len()).map(|p| self.indices(p).len()).sum();
        let mut out = Tensor::zeros(&[n, d]);
        for (p, view) in views.iter().enumerate() {
            let idx = self.indices(p);
            if view.rows() != n || view.cols() != idx.len() {
                return Err(DataError::Partition(format!("view {p} has shape {:?}", view.shape())));
            }
            for i in 0..n {
                let src = view.row(i);
                let dst = out.row_mut(i);
                for (j, &f) in idx.iter().enumerate() {
                    dst[f] = src[j];
                }
            }
        }
        Ok(out)
    }
}

/// Per-party feature views, in party order.
pub fn vertical_split(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Tensor>, DataError> {
    spec.validate(dataset.dim())?;
    Ok((0..spec.parties())
        .map(|p| dataset.features().select_cols(&spec.indices(p)))
        .collect())
}

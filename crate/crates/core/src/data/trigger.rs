use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, PartitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Pixel,
    Feature,
}

/// One overwritten feature, value already in the scaled `[0, 1]` domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerCell {
    pub feature: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub cells: Vec<TriggerCell>,
    /// Party whose feature slice must contain every cell, when set.
    pub owner: Option<usize>,
}

impl TriggerSpec {
    /// Pixel trigger at `(row, col)` positions of a `cols`-wide image; the
    /// raw byte value is scaled by 1/255.
    pub fn pixels(cols: usize, positions: &[(usize, usize)], raw: u8) -> Self {
        TriggerSpec {
            kind: TriggerKind::Pixel,
            cells: positions
                .iter()
                .map(|&(r, c)| TriggerCell {
                    feature: r * cols + c,
                    value: raw as f64 / 255.0,
                })
                .collect(),
            owner: None,
        }
    }

    pub fn feature(index: usize, value: f64) -> Self {
        TriggerSpec {
            kind: TriggerKind::Feature,
            cells: vec![TriggerCell { feature: index, value }],
            owner: None,
        }
    }

    /// Four-pixel MNIST trigger in the lower-right corner.
    pub fn mnist_corner() -> Self {
        TriggerSpec::pixels(28, &[(25, 27), (27, 25), (26, 26), (27, 27)], 255)
    }

    pub fn owned_by(mut self, party: usize) -> Self {
        self.owner = Some(party);
        self
    }

    /// One single-pixel trigger per listed party, placed at the last
    /// (lowest, then rightmost) feature of that party's block.
    pub fn block_corners(partition: &PartitionSpec, parties: &[usize], raw: u8) -> Vec<TriggerSpec> {
        parties
            .iter()
            .map(|&p| {
                let corner = *partition.indices(p).iter().max().expect("party owns features");
                TriggerSpec {
                    kind: TriggerKind::Pixel,
                    cells: vec![TriggerCell {
                        feature: corner,
                        value: raw as f64 / 255.0,
                    }],
                    owner: Some(p),
                }
            })
            .collect()
    }
}

/// Writes the trigger into the listed samples and marks them. Applying the
/// same trigger twice is the same as applying it once.
pub fn apply_trigger(
    dataset: &Dataset,
    spec: &TriggerSpec,
    ids: &[usize],
    partition: Option<&PartitionSpec>,
) -> Result<Dataset, DataError> {
    let d = dataset.dim();
    for cell in &spec.cells {
        if cell.feature >= d {
            return Err(DataError::Trigger(format!("feature {} outside 0..{d}", cell.feature)));
        }
        if !(0.0..=1.0).contains(&cell.value) {
            return Err(DataError::Trigger(format!("value {} outside [0, 1]", cell.value)));
        }
        if let (Some(owner), Some(part)) = (spec.owner, partition) {
            if part.owner_of(cell.feature) != Some(owner) {
                return Err(DataError::Trigger(format!(
                    "feature {} is not in party {owner}'s slice",
                    cell.feature
                )));
            }
        }
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= dataset.len()) {
        return Err(DataError::Trigger(format!("sample {bad} outside 0..{}", dataset.len())));
    }
    let mut out = dataset.clone();
    for &i in ids {
        let row = out.features_mut().row_mut(i);
        for cell in &spec.cells {
            row[cell.feature] = cell.value;
        }
        out.mark(i);
    }
    Ok(out)
}

/// `k` distinct clean samples of class `target`, sorted.
pub fn select_targets(dataset: &Dataset, target: usize, k: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    let mut pool: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.labels()[i] == target && !dataset.trigger_mask()[i])
        .collect();
    if pool.len() < k {
        return Err(DataError::InsufficientClass {
            class: target,
            available: pool.len(),
            requested: k,
        });
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `k` distinct ids from `0..n` avoiding `exclude`, sorted.
pub fn choose_ids(n: usize, k: usize, seed: u64, exclude: &[usize]) -> Result<Vec<usize>, DataError> {
    let mut pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    if pool.len() < k {
        return Err(DataError::Invalid(format!("cannot choose {k} of {} ids", pool.len())));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

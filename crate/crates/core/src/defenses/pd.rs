use serde::Serialize;

use crate::numerics::entropy;

/// Row-stochastic distribution of restored labels per true class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Number of samples with each true label; zero rows are unsupported.
    pub support: Vec<usize>,
}

impl PdMatrix {
    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn row_entropies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| entropy(r)).collect()
    }

    /// Mean entropy over supported rows.
    pub fn mean_row_entropy(&self) -> f64 {
        let supported: Vec<f64> = self
            .row_entropies()
            .into_iter()
            .zip(&self.support)
            .filter(|(_, &n)| n > 0)
            .map(|(h, _)| h)
            .collect();
        if supported.is_empty() {
            0.0
        } else {
            supported.iter().sum::<f64>() / supported.len() as f64
        }
    }

    /// Fraction of all entries below `threshold`.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        let c = self.classes();
        let hits = self.rows.iter().flatten().filter(|&&v| v < threshold).count();
        hits as f64 / (c * c) as f64
    }
}

/// `P[i][j] = #(true = i, restored = j) / #(true = i)`.
pub fn pd_matrix(truth: &[usize], restored: &[usize], classes: usize) -> PdMatrix {
    assert_eq!(truth.len(), restored.len(), "label vectors differ in length");
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&t, &r) in truth.iter().zip(restored) {
        counts[t][r] += 1;
    }
    let support: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let rows = counts
        .iter()
        .zip(&support)
        .map(|(r, &n)| {
            r.iter()
                .map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 })
                .collect()
        })
        .collect();
    PdMatrix { rows, support }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_restoration_is_identity() {
        let y = [0, 1, 2, 2, 1];
        let p = pd_matrix(&y, &y, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.rows[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(p.mean_row_entropy(), 0.0);
    }

    #[test]
    fn rows_sum_to_one_or_zero() {
        let p = pd_matrix(&[0, 0, 0, 2], &[1, 2, 2, 0], 3);
        assert!((p.rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.rows[1].iter().sum::<f64>(), 0.0);
        assert_eq!(p.support, vec![3, 0, 1]);
        assert!((p.fraction_below(0.01) - 6.0 / 9.0).abs() < 1e-12);
    }
}

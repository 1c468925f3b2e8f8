//! Dense numerics: tensors, MLPs, softmax cross-entropy and a
//! finite-difference oracle.

mod mlp;
mod optim;
mod tensor;

pub use mlp::{Activation, Activations, GradBundle, Layer, Mlp};
pub use optim::{Adam, Optimizer, OptimizerKind};
pub use tensor::{argmax, axpy, dot, l2_norm, one_hot, one_hot_matrix, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{context}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{context}: non-finite value at index {index}")]
    NonFinite { context: &'static str, index: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("finite-difference oracle: f is not finite at coordinate {coordinate}")]
    Oracle { coordinate: usize },
}

/// Floor applied inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let s = softmax(logits.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

/// Vector-Jacobian product through softmax: given `p = softmax(z)` and
/// `v = dL/dp`, returns `dL/dz = p * (v - <p, v>)`.
pub fn softmax_vjp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let pv = dot(p, v);
    p.iter().zip(v).map(|(pi, vi)| pi * (vi - pv)).collect()
}

fn check_targets(target: &Tensor) -> Result<(), NumericsError> {
    for (i, row) in target.iter_rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(NumericsError::Contract(format!(
                "target row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy of `softmax(logits)` against `target`, via log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, target: &Tensor) -> Result<f64, NumericsError> {
    logits.expect_same_shape(target, "softmax_cross_entropy")?;
    check_targets(target)?;
    let n = logits.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|i| {
            let ls = log_softmax(logits.row(i));
            -dot(target.row(i), &ls)
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-sample `dl/dH = softmax(H) - target`, one row per sample.
pub fn softmax_ce_grad(logits: &Tensor, target: &Tensor) -> Result<Tensor, NumericsError> {
    logits.expect_same_shape(target, "softmax_ce_grad")?;
    check_targets(target)?;
    let s = softmax_rows(logits);
    s.sub(target)
}

/// Central differences `(f(v + eps e_j) - f(v - eps e_j)) / (2 eps)`.
pub fn finite_difference_grad<F>(f: F, v: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(&[f64]) -> f64,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe = v.to_vec();
    let mut out = Vec::with_capacity(v.len());
    for j in 0..v.len() {
        let orig = probe[j];
        probe[j] = orig + eps;
        let up = f(&probe);
        probe[j] = orig - eps;
        let down = f(&probe);
        probe[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::Oracle { coordinate: j });
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Scales `v` by `min(1, c / |v|_2)`.
pub fn clip_l2(v: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm <= c || norm == 0.0 {
        return v.to_vec();
    }
    let s = c / norm;
    v.iter().map(|x| x * s).collect()
}

/// Shannon entropy (nats) with the log floor.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>()
}

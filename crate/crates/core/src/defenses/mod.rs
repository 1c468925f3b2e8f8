//! Active-party defenses: CoAE label disguise, DP noise, gradient
//! sparsification, plus the PD-matrix leakage diagnostic.

mod coae;
mod noise;
mod pd;

pub use coae::{coae_losses, train_coae, CoAe, CoaeConfig, CoaeLosses, TrainingReport};
pub use noise::{dp_noise, sample_laplace, sparsify, NoiseKind};
pub use pd::{pd_matrix, PdMatrix};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{argmax, one_hot, softmax, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid defense configuration: {0}")]
    Config(String),
    #[error("CoAE training failed the acceptance gates: {0}")]
    TrainingFailed(String),
    #[error("CoAE file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    #[default]
    None,
    Coae,
    DpGaussian,
    DpLaplace,
    Sparsify,
}

/// Declarative defense parameters; only the fields of the chosen mode are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub mode: DefenseMode,
    /// Gaussian standard deviation.
    pub sigma: f64,
    /// Laplace scale.
    pub b: f64,
    pub clip: f64,
    pub drop_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            mode: DefenseMode::None,
            sigma: 0.01,
            b: 0.01,
            clip: 0.2,
            drop_rate: 0.99,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        let bad = |m: &str| Err(DefenseError::Config(m.to_string()));
        match self.mode {
            DefenseMode::DpGaussian if !(self.sigma > 0.0) => bad("sigma must be > 0"),
            DefenseMode::DpLaplace if !(self.b > 0.0) => bad("b must be > 0"),
            DefenseMode::DpGaussian | DefenseMode::DpLaplace if !(self.clip > 0.0) => bad("clip must be > 0"),
            DefenseMode::Sparsify if !(0.0..1.0).contains(&self.drop_rate) => bad("drop rate must be in [0, 1)"),
            DefenseMode::Coae if self.lambda2 < 0.0 => bad("lambda2 must be >= 0"),
            _ => Ok(()),
        }
    }
}

/// Runtime defense installed in the active party.
#[derive(Debug, Clone, Default)]
pub enum Defense {
    #[default]
    None,
    Coae(Arc<CoAe>),
    Noise { kind: NoiseKind, scale: f64, clip: f64 },
    Sparsify { drop_rate: f64 },
}

impl Defense {
    /// Soft target the loss is computed against.
    pub fn target(&self, label: usize, classes: usize) -> Vec<f64> {
        match self {
            Defense::Coae(coae) => coae.fake_label(label).to_vec(),
            _ => one_hot(label, classes),
        }
    }

    /// Transform applied to each per-sample gradient before it leaves the party.
    pub fn transform<R: Rng + ?Sized>(&self, g: Vec<f64>, rng: &mut R) -> Vec<f64> {
        match self {
            Defense::Noise { kind, scale, clip } => dp_noise(&g, *kind, *scale, *clip, rng).expect("validated scale"),
            Defense::Sparsify { drop_rate } => sparsify(&g, *drop_rate),
            Defense::None | Defense::Coae(_) => g,
        }
    }

    /// Class decision from fused logits.
    pub fn decide(&self, logits: &[f64]) -> Result<usize, DefenseError> {
        match self {
            Defense::Coae(coae) => {
                let p = Tensor::from_vec(&[1, logits.len()], softmax(logits))?;
                Ok(argmax(coae.decode(&p)?.row(0)))
            }
            _ => Ok(argmax(logits)),
        }
    }

    pub fn coae(&self) -> Option<&CoAe> {
        match self {
            Defense::Coae(c) => Some(c),
            _ => None,
        }
    }
}

/// `softmax(H) - Enc(one_hot(y))` per sample.
pub fn coae_defended_grads(coae: &CoAe, labels: &[usize], logits: &Tensor) -> Result<Tensor, DefenseError> {
    if logits.cols() != coae.classes() || logits.rows() != labels.len() {
        return Err(DefenseError::Shape(format!(
            "logits {:?} for {} labels and a {}-class CoAE",
            logits.shape(),
            labels.len(),
            coae.classes()
        )));
    }
    let mut out = Tensor::zeros(&[labels.len(), coae.classes()]);
    for (i, &y) in labels.iter().enumerate() {
        let s = softmax(logits.row(i));
        let fake = coae.fake_label(y);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = s[j] - fake[j];
        }
    }
    Ok(out)
}

/// `argmax(Dec(p))` per row of fused softmax outputs.
pub fn coae_decode_predictions(coae: &CoAe, probs: &Tensor) -> Result<Vec<usize>, DefenseError> {
    Ok(coae.decode(probs)?.iter_rows().map(argmax).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{one_hot_matrix, softmax_ce_grad};

    #[test]
    fn identity_coae_grads_equal_plain() {
        let coae = CoAe::identity(3, 40.0).unwrap();
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -1.0, 0.5, 1.0, 1.0, 0.0]).unwrap();
        let labels = [2, 0];
        let d = coae_defended_grads(&coae, &labels, &logits).unwrap();
        let p = softmax_ce_grad(&logits, &one_hot_matrix(&labels, 3)).unwrap();
        for (a, b) in d.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_of_fake_label_returns_class() {
        let coae = CoAe::identity(4, 40.0).unwrap();
        let t = Tensor::from_rows(coae.fake_labels()).unwrap();
        assert_eq!(coae_decode_predictions(&coae, &t).unwrap(), vec![0, 1, 2, 3]);
        let uniform = Tensor::from_vec(&[1, 4], vec![0.25; 4]).unwrap();
        assert_eq!(coae_decode_predictions(&coae, &uniform).unwrap(), vec![0]);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let coae = CoAe::identity(3, 10.0).unwrap();
        assert!(coae_defended_grads(&coae, &[0], &Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = DefenseConfig {
            mode: DefenseMode::DpGaussian,
            sigma: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.sigma = 0.1;
        assert!(cfg.validate().is_ok());
        cfg.mode = DefenseMode::Sparsify;
        cfg.drop_rate = 1.0;
        assert!(cfg.validate().is_err());
    }
}

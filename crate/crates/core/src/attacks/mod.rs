//! Passive-party attacks on the protocol.

mod backdoor;
mod label_inference;

pub use backdoor::{
    active_label_poison, gr_backward_hook, gr_forward_hook, replace_gradient_label, GrAttacker, GrBackdoorConfig,
    Ledger, SharedLedger,
};
pub use label_inference::{
    infer_labels, label_from_gradient_sign, GradientRecorder, Observation, match_loss, run_inference, simulate_grad, GradientMatcher,
    InferenceConfig, InferenceResult, LabelInferenceState, MatchOutput,
};

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::protocol::ProtocolError;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label inference diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("gradient has {negatives} negative entries; the label is ambiguous")]
    AmbiguousGradient { negatives: usize },
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("ledger: {0}")]
    Ledger(String),
}

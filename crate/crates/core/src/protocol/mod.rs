//! Multi-party VFL training with mocked encryption.
//!
//! Party order inside a session is fixed: passive parties `0..K-1`, the
//! active (label-owning) party last. Each round:
//!
//! 1. every passive party encrypts its per-sample outputs `H_k` and may
//!    rewrite them through its [`PassiveHooks`];
//! 2. the active party fuses them with its own output, applies its defense
//!    and produces an encrypted per-sample gradient `g_i`;
//! 3. every party turns the broadcast `g_i` into an encrypted parameter
//!    gradient, aggregates it over the batch and has the TTP decrypt it;
//! 4. every party takes an SGD step.

mod opaque;
mod session;

pub use opaque::{DecryptRecord, OpaqueVec, PartyId, Provenance, Ttp};
pub use session::{
    ActiveParty, BackwardContext, Contribution, EvalMetrics, ForwardContext, ObserveContext, PassiveHooks,
    PassiveParty, honest_contributions, RoundReport, VflSession,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("aggregation rejected: {0}")]
    Aggregation(String),
    #[error("decryption refused: {0}")]
    Refused(String),
    #[error("bad batch: {0}")]
    Batch(String),
    #[error("session setup: {0}")]
    Setup(String),
}

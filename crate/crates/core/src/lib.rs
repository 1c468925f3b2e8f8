//! Vertical federated learning simulator.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod harness;
pub mod numerics;
pub mod protocol;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    Attack(#[from] attacks::AttackError),
    #[error(transparent)]
    Defense(#[from] defenses::DefenseError),
}

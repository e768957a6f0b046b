//! Simulator for grid-forming converters in an islandable microgrid, with a
//! neural controller trained to imitate the cascaded droop controller.

pub mod control;
pub mod converter;
pub mod frames;
pub mod harness;
pub mod network;
pub mod pinn;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state")]
    NonFiniteState,
    #[error("invalid load: {0}")]
    InvalidLoad(String),
    #[error("unknown breaker {0}")]
    UnknownBreaker(String),
    #[error("singular network: {0}")]
    SingularNetwork(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("trajectory too short")]
    TrajectoryTooShort,
    #[error("record too short")]
    RecordTooShort,
    #[error("training diverged at iteration {0}")]
    Diverged(usize),
    #[error("all runs diverged")]
    AllRunsDiverged,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SimError {
    /// Whether the error stems from bad user input rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SimError::Config(_)
                | SimError::InvalidLoad(_)
                | SimError::UnknownBreaker(_)
                | SimError::SingularNetwork(_)
                | SimError::CorruptModel(_)
                | SimError::ShapeMismatch(_)
                | SimError::Io(_)
                | SimError::Csv(_)
        )
    }
}

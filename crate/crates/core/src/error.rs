use thiserror::Error;

/// Errors surfaced by fitting, scoring and selection routines.
#[derive(Debug, Error)]
pub enum BartError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("chain is empty")]
    EmptyChain,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("proposal unavailable: {0}")]
    ProposalUnavailable(String),
}

pub type Result<T> = std::result::Result<T, BartError>;

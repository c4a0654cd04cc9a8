use thiserror::Error;

use crate::variable::VariableKey;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown variable {0}")]
    UnknownVariable(VariableKey),

    #[error("factor has no variables")]
    EmptyFactor,

    #[error("factor references variable {0} more than once")]
    DuplicateVariable(VariableKey),

    #[error("block index ({0}, {1}) outside the variable layout")]
    BlockOutOfRange(usize, usize),

    #[error("damped system is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },

    #[error("primal step failed twice; last damping {zeta}")]
    PrimalStepAborted { zeta: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

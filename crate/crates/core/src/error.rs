use thiserror::Error;

use crate::MinerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("miner {miner}: {reason}")]
    Behavior { miner: MinerId, reason: String },

    #[error("transaction rejected: {0}")]
    Transaction(String),

    #[error("non-finite parameter after update step {step}")]
    Diverged { step: usize },

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u64, reason: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

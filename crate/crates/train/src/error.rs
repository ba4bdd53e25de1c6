use thiserror::Error;

use crate::checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numeric(#[from] intft_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for `{tensor}` at step {step}")]
    NonFiniteGradient { step: u64, tensor: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: u64,
        last_good: Box<Checkpoint>,
    },

    #[error("dataset error: {0}")]
    Data(#[from] DataError),

    #[error("{context}: {source}")]
    Grid {
        context: String,
        #[source]
        source: Box<TrainError>,
    },

    /// A bound check failed; `sample` is a JSON serialization of the offending input.
    #[error("bound violated ({context}); sample: {sample}")]
    BoundViolation { context: String, sample: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

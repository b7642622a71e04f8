use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("sequence of length {len} exceeds maximum length {max}")]
    Length { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no negative candidate: {0}")]
    NoCandidate(String),

    #[error("pool {0} is empty")]
    PoolExhausted(usize),

    #[error("no training data: {0}")]
    NoTrainingData(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("input is within {margin} of a non-differentiable point; resample")]
    NearKink { margin: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence of length {len} is shorter than the required {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("token id {token} at position {position} is outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error("policy and reference models have different configurations")]
    ConfigMismatch,
    #[error("weight vector has length {got}, response has length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("anchor response is empty")]
    EmptyAnchor,
    #[error("corpus spec is infeasible: {0}")]
    SpecInfeasible(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-finite loss at step {step}; last good checkpoint: {checkpoint:?}")]
    NonFiniteLoss {
        step: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint i/o error: {0}")]
    CheckpointIo(String),
    #[error("models are identical to the reference; nothing to compare")]
    UntrainedInput,
    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum RlmError {
    /// Non-finite values where finite math is required.
    NonFinite(String),
    /// Input sequence exceeds the model's positional table.
    SequenceTooLong { len: usize, max: usize },
    /// Empty input where at least one element is required.
    EmptySequence(String),
    /// Estimator preconditions (e.g. CLUB needs at least two samples).
    BatchTooSmall(String),
    /// Shape or id mismatch against the model configuration.
    ShapeMismatch(String),
    /// Decoder driven past the end of its input.
    DecodeComplete,
    /// Alignment vector inconsistent with the (source, target) pair.
    InvalidAlignment(String),
    /// Malformed corpus, config, or checkpoint data.
    InvalidData(String),
    /// Oracle guard against exponential blowup.
    VocabTooLarge { vocab: usize, max: usize },
    /// Training aborted (non-finite loss and similar).
    TrainAbort(String),
    Io(String),
}

impl fmt::Display for RlmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RlmError::NonFinite(what) => write!(f, "non-finite {what}"),
            RlmError::SequenceTooLong { len, max } => {
                write!(f, "sequence too long: {len} tokens, limit {max}")
            }
            RlmError::EmptySequence(what) => write!(f, "empty sequence: {what}"),
            RlmError::BatchTooSmall(what) => write!(f, "{what}"),
            RlmError::ShapeMismatch(what) => write!(f, "shape mismatch: {what}"),
            RlmError::DecodeComplete => write!(f, "decode complete"),
            RlmError::InvalidAlignment(what) => write!(f, "invalid alignment: {what}"),
            RlmError::InvalidData(what) => write!(f, "invalid data: {what}"),
            RlmError::VocabTooLarge { vocab, max } => {
                write!(f, "vocabulary of {vocab} exceeds oracle limit {max}")
            }
            RlmError::TrainAbort(what) => write!(f, "training aborted: {what}"),
            RlmError::Io(what) => write!(f, "io error: {what}"),
        }
    }
}

impl std::error::Error for RlmError {}

impl From<std::io::Error> for RlmError {
    fn from(e: std::io::Error) -> Self {
        RlmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RlmError>;

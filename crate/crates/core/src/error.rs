use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PkmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Batch statistics are undefined for a single example.
    #[error("degenerate batch: batch normalization in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, PkmError>;

pub(crate) fn invalid_arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(PkmError::InvalidArgument(msg.into()))
}

use pkm_core::PkmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Memory(#[from] PkmError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: loss = {loss}; {diagnostic}")]
    TrainingDiverged { step: u64, loss: f64, diagnostic: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LmError::InvalidArgument(msg.into()))
}

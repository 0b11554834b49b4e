use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum SparksError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SparksError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SparksError::InvalidArgument(msg.into()))
}

use sparks_core::SparksError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("config: {0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] SparksError),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage and config problems, 1 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::UnknownKey { .. } | CliError::Config { .. } | CliError::Invalid(_) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(SparksError::Io(e))
    }
}

use std::path::{Path, PathBuf};

use prompt_ttt_core::Error as CoreError;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration.
    #[error("{0}")]
    Usage(String),
    /// A file exists but cannot be parsed, or a referenced file is missing.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
    /// A run completed but violated one of its own checks.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for usage, configuration and input-data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Format { .. } | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Shape(_) | CoreError::Validation(_) => 2,
                _ => 1,
            },
            CliError::Internal(_) => 1,
        }
    }
}

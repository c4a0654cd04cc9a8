use std::path::PathBuf;

use alfg_apps::AppError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// `--help` or `--version` output.
    #[error("{0}")]
    Help(String),
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: line {line}: {message}")]
    Config { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    App(#[from] AppError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    /// The run finished but did not meet its own success condition.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::App(AppError::Parse { .. } | AppError::Invalid(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;

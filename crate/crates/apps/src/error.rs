use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Solver(#[from] alfg::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

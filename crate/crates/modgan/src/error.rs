use std::path::PathBuf;
use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum ModGanError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ModGanError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ModGanError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, ModGanError>;

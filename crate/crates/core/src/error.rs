use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line count mismatch: {path} has {found} lines, expected {expected}")]
    Alignment {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("translator error: {0}")]
    Translator(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged in stage {stage} at epoch {epoch}")]
    Diverged { stage: String, epoch: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

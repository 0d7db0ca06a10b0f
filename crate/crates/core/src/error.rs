use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KcanError {
    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0} contains no records")]
    Empty(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("cannot sample a negative: {0}")]
    Unsampleable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),
}

impl KcanError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KcanError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            KcanError::Parse { .. }
                | KcanError::Io { .. }
                | KcanError::Empty(_)
                | KcanError::Alignment(_)
                | KcanError::Snapshot(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, KcanError>;

use std::path::PathBuf;

/// Errors of the std layer: IO and file formats, plus wrapped core errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary data; `offset` is a byte offset into the input.
    #[error("{source_name}: byte offset {offset}: {message}")]
    Binary {
        source_name: String,
        offset: u64,
        message: String,
    },

    /// Malformed text data; `line` is 1-based.
    #[error("{source_name}: line {line}: {message}")]
    Text {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("record count mismatch: {dataset} dataset lines but {embeddings} embedding rows")]
    CountMismatch { dataset: usize, embeddings: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cdi_core::Error),

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

pub type Result<T> = std::result::Result<T, Error>;

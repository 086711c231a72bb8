use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid residue {letter:?} at position {position}")]
    Alphabet { position: usize, letter: char },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("embedding container format error: {0}")]
    EmbeddingFormat(String),

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("self-alignment score of {0:?} is zero; similarity is undefined")]
    DegenerateNormalization(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    TrainingDivergence { step: usize, loss: f64 },

    #[error("sampling diverged: {0}")]
    SamplingDivergence(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {0:?} has no cluster assignment")]
    MissingCluster(String),

    #[error("fetch of {url} failed with HTTP status {status}")]
    Fetch { url: String, status: u16 },

    #[error("network error: {0}")]
    Network(String),

    #[error("{0:?} is not cached and offline mode is set")]
    CacheMiss(PathBuf),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Format {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("empty training corpus")]
    EmptyTrainingCorpus,

    #[error("empty vocabulary: no token occurred more than {cutoff} times")]
    EmptyVocabulary { cutoff: usize },

    #[error("missing feature vector for image id {image_id}")]
    MissingFeatures { image_id: String },

    #[error("image id {image_id} has no reference captions")]
    MissingReferences { image_id: String },

    #[error("feature dimension mismatch for image id {image_id}: expected {expected}, found {found}")]
    DimensionMismatch {
        image_id: String,
        expected: usize,
        found: usize,
    },

    #[error("zero-norm feature vector")]
    ZeroNormVector,

    #[error("empty reference list")]
    EmptyReferences,

    #[error("empty hypothesis/reference pair list")]
    EmptyPairs,

    #[error("empty nearest-neighbor index")]
    EmptyIndex,

    #[error("numerical overflow")]
    NumericalOverflow,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("no gate training data")]
    NoGateTrainingData,

    #[error("empty evaluation split {split}")]
    EmptySplit { split: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid checkpoint {path}: {message}")]
    InvalidCheckpoint { path: PathBuf, message: String },

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            file: path.into(),
            line,
            message: message.into(),
        }
    }
}

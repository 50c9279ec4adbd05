use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid anchor: width {width} and height {height} must be positive")]
    InvalidAnchor { width: f64, height: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("annotation error at {locus}: {message}")]
    Annotation { locus: String, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("missing features for scene {0}")]
    MissingFeatures(u64),

    #[error("non-finite loss {loss} while training on scene {scene_id}")]
    NonFiniteLoss { scene_id: u64, loss: f64 },

    #[error("training diverged in round {round}, epoch {epoch}: {source}")]
    Diverged {
        round: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
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

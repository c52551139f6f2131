use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of bounds for axis {axis} with extent {extent}")]
    Bounds {
        axis: char,
        index: usize,
        extent: usize,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("incompatible parameters: {0}")]
    Compatibility(String),

    #[error("sequence too short: {len} frames, need at least {required}")]
    SequenceTooShort { len: usize, required: usize },

    #[error("volume too small: extents {extents:?}, need at least {required:?}")]
    VolumeTooSmall {
        extents: [usize; 3],
        required: [usize; 3],
    },

    #[error("stage mismatch: checkpoint is {found}, expected {expected} (pass the stage override to continue anyway)")]
    StageMismatch { found: String, expected: String },

    #[error("training diverged at epoch {epoch}, iteration {iteration} (loss {loss}); last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

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

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

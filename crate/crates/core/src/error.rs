use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("max-pool over an empty row set")]
    EmptyPool,
    #[error("backward seed must be a 1x1 scalar, got {0:?}")]
    NonScalarSeed((usize, usize)),
    #[error("point is behind the camera (z' = {0})")]
    BehindCamera(f64),
    #[error("codec mode mismatch: expected {expected}, got {got}")]
    ModeMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("{axis} coordinate {value} outside grid extent [{min}, {max}]")]
    OutOfExtent {
        axis: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    #[error("checkpoint: {field}: {reason}")]
    Checkpoint { field: &'static str, reason: String },
    #[error("frame file line {line}: {reason}")]
    FrameFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

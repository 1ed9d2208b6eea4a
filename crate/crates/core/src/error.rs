use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid scenario script: {0}")]
    InvalidScript(String),

    #[error("invalid log: {0}")]
    InvalidLog(String),

    #[error("length mismatch: estimate has {est} poses, ground truth has {gt}")]
    LengthMismatch { est: usize, gt: usize },

    #[error("trajectory too short: arc length {arc_length:.3} m < segment length {segment_length:.3} m")]
    TrajectoryTooShort { arc_length: f64, segment_length: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("empty batch")]
    EmptyBatch,

    #[error("insufficient data: need at least {needed} training samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("log too short: {len} samples, window needs {window}")]
    LogTooShort { len: usize, window: usize },

    #[error("disconnected graph: {0}")]
    DisconnectedGraph(String),

    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("checkpoint does not match model spec: {0}")]
    SpecMismatch(String),

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

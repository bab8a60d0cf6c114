use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty audio")]
    EmptyAudio,

    #[error("invalid samples: {0}")]
    InvalidSamples(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too short for adapter")]
    SequenceTooShort,

    #[error("no valid targets")]
    NoValidTargets,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("turn {turn} has neither audio nor features")]
    MissingAudio { turn: usize },

    #[error("validation failed for dialogue '{dialogue_id}': {reason}")]
    Validation { dialogue_id: String, reason: String },

    #[error("unknown format '{0}'")]
    UnknownFormat(String),

    #[error("missing fields: {}", .0.join(", "))]
    MissingFields(Vec<String>),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("no score found")]
    NoScore,

    #[error("score {0} out of range [0, 10]")]
    ScoreOutOfRange(f64),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("corrupt container: {0}")]
    Container(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

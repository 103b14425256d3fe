use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("truncated or malformed stream at byte offset {offset}")]
    Parse { offset: usize },

    #[error("signal `{label}` has digital_min == digital_max or physical_min == physical_max")]
    DegenerateCalibration { label: String },

    #[error("header field `{0}` is not a valid number")]
    HeaderField(String),

    #[error("annotations leave {start_sec}s..{end_sec}s uncovered")]
    CoverageGap { start_sec: f64, end_sec: f64 },

    #[error("unknown stage token `{0}`")]
    UnknownStage(String),

    #[error("sampling rate {0} Hz is below 100 Hz")]
    UnsupportedRate(f64),

    #[error("signal has zero variance")]
    DegenerateSignal,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in `{layer}`")]
    Numerical { layer: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel `{0}` not found")]
    ChannelNotFound(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal has {len} samples, shorter than one frame of {frame_len}")]
    SignalTooShort { len: usize, frame_len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("visual features are required for {0} models")]
    MissingVisual(&'static str),
    #[error("objective is not a scalar (shape {0}x{1})")]
    NonScalarObjective(usize, usize),
    #[error("non-finite objective at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },
    #[error("malformed container {path:?}: {reason}")]
    Format { path: Option<PathBuf>, reason: String },
    #[error("unsupported audio format: {0}")]
    UnsupportedAudio(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(reason: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            reason: reason.into(),
        }
    }
}

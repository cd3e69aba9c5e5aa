use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DarnetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("missing mask for image stem `{stem}` in class `{class}`")]
    MissingMask { class: String, stem: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("tile size {tile} does not divide image of {height}x{width}")]
    NonDivisibleTile {
        tile: usize,
        height: usize,
        width: usize,
    },

    #[error("class `{class}` has {available} records, need {needed}")]
    InsufficientRecords {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("invalid prototype: {0}")]
    InvalidPrototype(&'static str),

    #[error("degenerate episode: {0}")]
    DegenerateEpisode(String),

    #[error("CSD is train-only; extractor is in eval mode")]
    CsdInEvalMode,

    #[error("extractor has not been initialized")]
    Uninitialized,

    #[error("malformed feature file: {0}")]
    MalformedFeatureFile(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step} (episode seed {seed})")]
    NonFiniteLoss { step: usize, seed: u64 },
}

impl DarnetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DarnetError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DarnetError>;

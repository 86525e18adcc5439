use std::path::PathBuf;

use thiserror::Error;

use crate::slide_io::ChannelRole;

#[derive(Debug, Error)]
pub enum GandaError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("image has {found} planes but the channel map references plane {requested}")]
    PlaneCountMismatch { requested: usize, found: usize },
    #[error("channel role {0:?} declared more than once")]
    DuplicateRole(ChannelRole),
    #[error("unsupported bit depth: {0} bits per sample")]
    UnsupportedBitDepth(u16),
    #[error("missing channel: {0:?}")]
    MissingChannel(ChannelRole),
    #[error("missing patch for included tile ({row}, {col})")]
    MissingPatch { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("training dataset has no included patches")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("source mode {mode:?} needs {expected} input channels, network has {found}")]
    ChannelSpecMismatch {
        mode: crate::SourceMode,
        expected: usize,
        found: usize,
    },
    #[error("region is empty")]
    EmptyRegion,
    #[error("region {0} lies outside the slide")]
    RegionOutOfBounds(String),
    #[error("degenerate regression input: {0}")]
    DegenerateInput(String),
    #[error("mask has no true pixels")]
    EmptyMask,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl GandaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GandaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        GandaError::Codec {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = GandaError> = std::result::Result<T, E>;

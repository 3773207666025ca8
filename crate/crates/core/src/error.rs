use std::path::PathBuf;

use thiserror::Error;

use crate::data::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric fault in {op}: non-finite output")]
    NumericFault { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("modality mismatch: expected {expected}, got {got}")]
    ModalityMismatch { expected: Modality, got: Modality },

    #[error("mixed-modality batch")]
    MixedModality,

    #[error("attempt to update frozen parameters `{0}`")]
    FrozenUpdate(String),

    #[error("encoder `{0}` must be frozen during diffusion training")]
    EncoderNotFrozen(Modality),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid split request: {0}")]
    Split(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),

    #[error("corrupt checkpoint header at byte offset {offset}: {reason}")]
    CorruptCheckpoint { offset: u64, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected}); no migration available")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("dataset format: {0}")]
    DatasetFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

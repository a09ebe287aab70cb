use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("channel mismatch: model expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("LoRA rank {rank} exceeds min(d_in, d_out) = {limit} for layer `{layer}`")]
    RankTooLarge { layer: String, rank: usize, limit: usize },

    #[error("LoRA layer selector matched no weight matrices")]
    EmptySelector,

    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("learning-rate guided sampling requires eta_initial != eta_final")]
    DegenerateSchedule,

    #[error("batch counts b_l and b_u are both zero")]
    EmptyBatch,

    #[error("crop {crop:?} larger than volume {volume:?}")]
    CropTooLarge { crop: [usize; 3], volume: [usize; 3] },

    #[error("no pseudo-mask for unlabeled volume `{0}`")]
    MissingPseudoMask(String),

    #[error("no prediction for test volume `{0}`")]
    MissingPrediction(String),

    #[error("surface distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("backward called without a recorded forward pass ({layer})")]
    NoForwardRecord { layer: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("cannot fold: {0}")]
    NotFoldable(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("JSON parse error at byte {offset}: {message}")]
    Json { offset: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("pipeline stage `{stage}` failed on frame {seq}: {message}")]
    Stage { stage: &'static str, seq: u64, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    NonFiniteLoss { epoch: usize, step: usize, snapshot: String },

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { arg, reason: reason.into() }
    }
}

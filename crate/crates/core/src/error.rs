use std::path::PathBuf;

/// Errors raised by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown transform `{0}`")]
    UnknownTransform(String),

    #[error("stage {stage} requires a completed stage {required} checkpoint")]
    StageOrder { stage: u8, required: u8 },

    #[error("training diverged in stage {stage} (view {view}); last good checkpoint: {checkpoint:?}")]
    Diverged {
        stage: u8,
        view: char,
        checkpoint: Option<PathBuf>,
    },

    #[error("confidence weights are all zero")]
    ZeroConfidence,

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn file_error(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Error {
    Error::File {
        path: path.into(),
        message: msg.to_string(),
    }
}

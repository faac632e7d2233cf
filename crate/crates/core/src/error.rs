use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GedError {
    #[error("validation error: {0}")]
    Validation(String),

    /// Fewer than two annotators: the label pool cannot be enumerated and the
    /// caller must fall back to single-label mode.
    #[error("degenerate annotation: {annotators} annotator(s), at least 2 required")]
    DegenerateAnnotation { annotators: usize },

    /// All edge-pixel counts are equal so min-max normalization is undefined.
    #[error("degenerate granularity: all edge-pixel counts equal {count}")]
    DegenerateGranularity { count: u64 },

    #[error("non-finite loss at step {step}: mse={mse} ord_pairwise={ord_pairwise} ord_gran={ord_gran}")]
    NonFiniteLoss {
        step: usize,
        mse: f64,
        ord_pairwise: f64,
        ord_gran: f64,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, GedError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GedError {
    GedError::Validation(msg.into())
}

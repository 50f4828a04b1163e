use thiserror::Error;

use crate::colorlab::ColorSpace;

#[derive(Debug, Error)]
pub enum CdstError {
    #[error("conversion from {from:?} to {to:?} is not supported")]
    ConversionUnsupported { from: ColorSpace, to: ColorSpace },

    #[error("image is empty")]
    EmptyImage,

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("unknown palette version {0:?}")]
    UnknownPalette(String),

    #[error("palette version mismatch: {0:?} vs {1:?}")]
    PaletteMismatch(String, String),

    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing weight {0:?}")]
    MissingWeight(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Tensor(#[from] cdst_tensor::TensorError),

    #[error("png: {0}")]
    Png(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CdstError>;

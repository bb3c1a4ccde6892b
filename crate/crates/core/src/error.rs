use flowmac_tensor::TensorError;
use thiserror::Error;

use crate::bitstream::StreamError;

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Stream(#[from] StreamError),

    #[error("audio: {0}")]
    Audio(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stream does not match the model configuration: {0}")]
    ConfigMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<hound::Error> for CodecError {
    fn from(e: hound::Error) -> Self {
        CodecError::Audio(e.to_string())
    }
}

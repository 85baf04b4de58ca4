use distillmatch_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

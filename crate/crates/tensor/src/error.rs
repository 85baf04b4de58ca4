use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,
    #[error("loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        msg: msg.into(),
    })
}

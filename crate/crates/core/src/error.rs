use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("zero-size input to {0}")]
    Empty(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid frame count {frames} for r_t={rt} ({mode})")]
    FrameCount {
        frames: usize,
        rt: usize,
        mode: &'static str,
    },

    #[error("corrupt stream: {0}")]
    Format(String),

    #[error("token index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: u64, size: u64 },

    #[error("regularizer mismatch: {0}")]
    Regularizer(String),

    #[error("stage 2 requires a stage 1 checkpoint")]
    MissingCheckpoint,

    #[error("parameter {0} not found")]
    MissingParam(String),

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
}

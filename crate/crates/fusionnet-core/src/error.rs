use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tensor ops, model assembly, data handling and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training aborted: non-finite values first produced by op `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("CAM undefined for fusion head")]
    CamUndefinedForFusionHead,
}

impl Error {
    pub fn shape_mismatch(context: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}

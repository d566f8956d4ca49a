use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("corrupt data at byte offset {offset}: {reason}")]
    CorruptData { offset: u64, reason: String },

    #[error("invalid imbalance ratio {0}: `ratio` must be >= 1")]
    InvalidRatio(f64),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code contract: validation errors exit 1, runtime errors exit 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidShape(_)
                | Error::ShapeMismatch(_)
                | Error::InvalidLabel { .. }
                | Error::InvalidRatio(_)
                | Error::Config(_)
        )
    }
}

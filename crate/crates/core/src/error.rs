use thiserror::Error;

pub type Result<T, E = FarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FarError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid class index {index} for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FarError {
    /// True for errors caused by NaN/Inf or divergence rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, FarError::NonFinite(_) | FarError::Diverged { .. })
    }
}

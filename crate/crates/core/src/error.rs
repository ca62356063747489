use cardio_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mode weight {index} = {value} is outside [-{limit}, {limit}]")]
    WeightOutOfRange { index: usize, value: f64, limit: f64 },
    #[error("degenerate view: {0}")]
    DegenerateView(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// True for failures caused by the optimization itself (NaN, divergence)
    /// rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            CoreError::Numerical(_) => true,
            CoreError::Autodiff(e) => matches!(
                e,
                AutodiffError::NonFinite(_) | AutodiffError::NanGradient(_)
            ),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

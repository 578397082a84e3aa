use thiserror::Error;

/// Failures raised by the array substrate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("vector norm {norm:e} is at or below the floor {floor:e}")]
    DegenerateNorm { norm: f64, floor: f64 },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

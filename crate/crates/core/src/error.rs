use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cholesky factorization failed even with jitter {jitter:e}")]
    Cholesky { jitter: f64 },
    #[error("non-finite {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiddleError {
    #[error("invalid chunk layout: {0}")]
    Layout(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: usize },
    #[error("backend unavailable: {0}")]
    Backend(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RiddleError> = std::result::Result<T, E>;

impl RiddleError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RiddleError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        RiddleError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

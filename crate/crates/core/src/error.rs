use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported teacher variant: {0}")]
    UnsupportedVariant(&'static str),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: usize, got: usize, context: &'static str) -> Self {
        Error::Shape {
            expected,
            got,
            context,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input (config/validation) rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

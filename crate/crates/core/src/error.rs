use thiserror::Error;

use crate::planner::llm::LlmError;

/// Errors raised across the toolkit.
///
/// Variants fall into two classes: input problems (bad shapes, malformed
/// files, schema violations) and runtime failures (I/O, divergence, LLM
/// transport). [`Error::is_validation`] tells them apart for exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("unsupported version: {0}")]
    UnsupportedVersion(String),

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Llm(#[from] LlmError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// True for errors caused by invalid input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Shape { .. }
                | Error::BadMagic { .. }
                | Error::TruncatedPayload { .. }
                | Error::UnsupportedVersion(_)
                | Error::Schema { .. }
                | Error::Format(_)
        )
    }

    /// Short machine-readable tag used in JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Shape { .. } => "shape",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Schema { .. } => "schema",
            Error::Format(_) => "format",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Llm(_) => "llm",
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or out-of-range input.
    Input,
    /// Inputs are individually valid but cannot be combined.
    Incompatible,
    /// Non-finite values or a numerical routine failed.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unrecognized tensor name `{0}`")]
    Naming(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("incomplete tensor set, missing: {}", missing.join(", "))]
    Completeness { missing: Vec<String> },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("cannot compose: {0}")]
    Composition(String),

    #[error("cannot apply delta to `{layer}`: base {base:?} vs delta {delta:?}")]
    Application {
        layer: String,
        base: (usize, usize),
        delta: (usize, usize),
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid simulation spec: {0}")]
    Spec(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. }
            | Error::Composition(_)
            | Error::Application { .. } => ErrorClass::Incompatible,
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Input,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

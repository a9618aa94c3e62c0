//! Error type shared by all modules.

use std::path::PathBuf;

/// Crate-wide error enum. Variants map onto the CLI exit codes: config and
/// usage problems exit 2, I/O and file-format problems exit 3, verification
/// failures exit 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Non-finite or otherwise unusable numeric input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor shapes inconsistent with the declared dimensions.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A structurally invalid specification (degenerate extent, zero dims...).
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Traversal order cannot be applied to the given grid.
    #[error("invalid traversal order: {0}")]
    InvalidOrder(String),

    /// Index outside its documented range.
    #[error("index out of range: {0}")]
    Range(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf detected mid-computation; `stage` names the pipeline step.
    #[error("non-finite value produced at stage `{stage}`")]
    Numeric { stage: &'static str },

    /// Config file rejected; `path` is the JSON field path when known.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A tensor or scene file failed to parse.
    #[error("format error in {file:?}: {message}")]
    Format { file: PathBuf, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

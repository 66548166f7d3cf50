//! Error types shared across the crate.

use std::path::PathBuf;

/// Errors produced by dataset IO, geometry, the network, and the harness.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A text file contained a token that could not be parsed.
    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    /// Companion files disagree (e.g. coordinate and normal row counts).
    #[error("inconsistent data: {0}")]
    Inconsistent(String),

    /// An input failed a documented precondition.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A patch is too degenerate to process (coincident points, etc.).
    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration value is out of range or unknown.
    #[error("config error: {0}")]
    Config(String),

    /// The requested operation does not apply in this mode.
    #[error("unsupported mode: {0}")]
    Unsupported(String),

    /// Dataset files are missing or unreadable.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training or inference hit a numerical failure (NaN loss, zero output).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint archive is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable one-word category used by the CLI for machine-parsable output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::Inconsistent(_) => "parse",
            Error::Validation(_) | Error::ShapeMismatch(_) => "validation",
            Error::DegeneratePatch(_) => "degenerate",
            Error::Config(_) => "config",
            Error::Unsupported(_) => "unsupported",
            Error::Dataset(_) => "dataset",
            Error::Numerical(_) => "numerical",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

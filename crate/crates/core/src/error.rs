//! Error type shared across the crate.

use thiserror::Error;

/// Unified error type.  The CLI maps [`CimlError::Validation`] to exit code 1
/// and everything else to exit code 2.
#[derive(Error, Debug)]
pub enum CimlError {
    /// Invalid configuration, assignment, or argument values.
    #[error("validation: {0}")]
    Validation(String),

    /// An operation was asked for inputs outside its domain
    /// (e.g. HD95 of an empty mask, Grad-CAM of a detached tensor).
    #[error("domain: {0}")]
    Domain(String),

    /// Shape mismatch between tensors or against a declared layout.
    #[error("shape: {0}")]
    Shape(String),

    /// File I/O and (de)serialisation failures; `path` names the offender.
    #[error("io: {path}: {message}")]
    Io { path: String, message: String },

    /// Non-finite loss or other numeric breakdown during training.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation: {0}")]
    Generation(String),
}

impl CimlError {
    pub fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        CimlError::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    /// Exit code for the CLI: validation errors are caller mistakes (1),
    /// everything else is a runtime failure (2).
    pub fn exit_code(&self) -> u8 {
        match self {
            CimlError::Validation(_) => 1,
            _ => 2,
        }
    }
}

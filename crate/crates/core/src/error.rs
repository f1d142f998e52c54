//! Crate-wide error type.
//!
//! Usage/config errors map to CLI exit code 1, failed runs to exit code 2.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration value or file.
    #[error("config error: {0}")]
    Config(String),

    /// Caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Operand shapes do not conform for a tensor primitive.
    #[error("shape mismatch in `{op}`: {details}")]
    Shape { op: &'static str, details: String },

    /// A requested enumeration exceeds the configured cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("parse error in {path}: {details}")]
    Parse { path: String, details: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Output exists and `--force` was not given.
    #[error("refusing to overwrite {0} (pass --force to allow)")]
    Exists(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

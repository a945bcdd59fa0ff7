//! Crate-wide error type and exit-code mapping for the CLI.

use std::path::PathBuf;

use thiserror::Error;

/// All failures surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or command-line usage (exit code 2).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Invalid or inconsistent data encountered at runtime (exit code 3).
    #[error("invalid data: {0}")]
    Data(String),

    /// A file did not parse as the expected format (exit code 3).
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Filesystem failure with the offending path attached (exit code 3).
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure (exit code 3).
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Non-finite values appeared in a numeric computation (exit code 4).
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A phantom specification that cannot be realised by rejection
    /// sampling within the attempt budget (exit code 3).
    #[error("infeasible phantom specification: {0}")]
    Infeasible(String),
}

impl Error {
    /// Process exit code for this error class: usage/config errors exit 2,
    /// data and format errors exit 3, numeric divergence exits 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }

    /// Attach a path to an `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Convenience constructor for format errors.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(Error::format("f", "bad").exit_code(), 3);
        assert_eq!(Error::Divergence("nan".into()).exit_code(), 4);
        assert_eq!(Error::Infeasible("no room".into()).exit_code(), 3);
    }
}

//! Error type for the CLI layer: every failure carries enough context to be
//! rendered as machine-readable JSON on stderr.

use std::path::PathBuf;

/// Errors surfaced by commands. Exit code 1; panics exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{module}/{operation}: {message}")]
    Module {
        module: &'static str,
        operation: &'static str,
        message: String,
    },
    #[error("{failed} of {total} gradient checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a core-module error with module/operation context.
    pub fn module(
        module: &'static str,
        operation: &'static str,
        err: impl std::fmt::Display,
    ) -> Self {
        CliError::Module {
            module,
            operation,
            message: err.to_string(),
        }
    }

    /// Machine-readable rendering written to stderr on failure.
    pub fn to_json(&self) -> String {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Module { .. } => "module",
            CliError::ChecksFailed { .. } => "checks_failed",
            CliError::InvalidInput(_) => "invalid_input",
        };
        serde_json::json!({ "error": { "kind": kind, "message": self.to_string() } }).to_string()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Config(err.to_string())
    }
}

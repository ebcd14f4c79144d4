use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI invocation, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    ConfigParse(String),

    #[error("no paired run found in {0}")]
    MissingPairedRun(PathBuf),

    #[error("schema mismatch in {path}: {reason}")]
    SchemaMismatch { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run failed: {0}")]
    Runtime(#[from] nlfkpp::Error),

    #[error("run ended in {0}")]
    Collapsed(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse(_) | CliError::MissingPairedRun(_) | CliError::SchemaMismatch { .. } => 2,
            CliError::Io { .. } | CliError::Runtime(_) | CliError::Collapsed(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a core error raised while validating user input.
    pub(crate) fn config(e: nlfkpp::Error) -> Self {
        CliError::ConfigParse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

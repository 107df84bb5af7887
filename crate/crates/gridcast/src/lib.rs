//! IO companion of the `gridcast-core` forecasting engine: the movie and
//! checkpoint file formats, plain-text config files, threaded evaluation
//! and search, and the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod format;
pub mod parallel;

use std::path::PathBuf;

/// Errors of the IO layer, split by exit code: usage/validation problems
/// exit 2, runtime failures exit 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] format::FormatError),

    #[error(transparent)]
    Core(#[from] gridcast_core::Error),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            // Core configuration errors are validation failures too.
            CliError::Core(gridcast_core::Error::Config { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Reads a file with path context in the error.
pub fn read_file(path: &PathBuf) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

/// Writes a file with path context in the error.
pub fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

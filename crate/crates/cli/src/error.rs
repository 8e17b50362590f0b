use std::path::{Path, PathBuf};

use maskvit_core::Error as CoreError;

/// Process exit code for bad input or configuration.
pub const EXIT_VALIDATION: i32 = 1;
/// Process exit code for I/O, numeric or other runtime failures.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("missing input: {0}")]
    Missing(PathBuf),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Self::Missing(path.to_path_buf());
        }
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Format { .. } | Self::Missing(_) => EXIT_VALIDATION,
            Self::Core(e) => match e {
                CoreError::Diverged { .. } | CoreError::NonDeterministic { .. } => EXIT_RUNTIME,
                _ => EXIT_VALIDATION,
            },
            Self::Io { .. } => EXIT_RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

use std::path::PathBuf;

use crate::metrics::MetricsError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Unreadable, malformed or inconsistent config.
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] loracomp::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for config errors, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config { .. } => 1,
            _ => 2,
        }
    }
}

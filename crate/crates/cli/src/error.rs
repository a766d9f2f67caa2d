use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: fedxfer::Error,
    },
    #[error(transparent)]
    Core(#[from] fedxfer::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, source: fedxfer::Error) -> Self {
        match source {
            fedxfer::Error::Io(e) => CliError::io(path, e),
            source => CliError::Input {
                path: path.to_path_buf(),
                source,
            },
        }
    }

    /// 2: config or validation, 3: numerical failure, 4: I/O.
    pub fn exit_code(&self) -> i32 {
        use fedxfer::Error as E;
        match self {
            CliError::Config(_) | CliError::Input { .. } => 2,
            CliError::Io { .. } | CliError::Core(E::Io(_)) => 4,
            CliError::Core(E::NonFinite { .. } | E::Internal(_) | E::Converged) => 3,
            CliError::Core(_) => 2,
        }
    }
}

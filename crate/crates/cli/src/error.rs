use std::path::PathBuf;

use scalefusion::ErrorKind;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] scalefusion::Error),
    #[error("config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for data and I/O problems, 4 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigFile { .. } => 2,
            CliError::Output { .. } => 3,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
        }
    }
}

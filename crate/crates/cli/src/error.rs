use std::path::PathBuf;

use mono_gp::experiments::ExperimentError;
use mono_gp::gp::GpError;
use mono_gp::scmc::ScmcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: duplicated input rows at lines {lines:?}")]
    DuplicateRows { path: PathBuf, lines: Vec<(u64, u64)> },
    #[error("{path}: no data rows")]
    EmptyData { path: PathBuf },
    #[error("{path}: snapshot version {found} is not supported (expected {expected}); re-run `fit` to regenerate it")]
    Migration {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: snapshot checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<ScmcError> for CliError {
    fn from(e: ScmcError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

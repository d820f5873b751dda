use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed:\n{0}")]
    Validation(String),

    #[error("{0}")]
    NotConverged(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Solver(mfglab::Error),

    #[error("prior run {path}: {message}")]
    PriorRun { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Validation(_) | CliError::PriorRun { .. } => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Solver(e) => match e {
                mfglab::Error::NotConverged { .. }
                | mfglab::Error::OuterNotConverged { .. }
                | mfglab::Error::Inner { .. }
                | mfglab::Error::NonConvergence { .. }
                | mfglab::Error::NonFiniteState { .. }
                | mfglab::Error::RegressionRankDeficient { .. }
                | mfglab::Error::LatticeTooNarrow { .. } => 3,
                _ => 2,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<mfglab::Error> for CliError {
    fn from(e: mfglab::Error) -> Self {
        CliError::Solver(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

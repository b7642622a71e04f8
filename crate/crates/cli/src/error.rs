use std::path::{Path, PathBuf};

/// Failure of a subcommand, mapped onto a process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}{source}", context(.path))]
    Core { path: Option<PathBuf>, source: cdcm::Error },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{failed} of {total} queries could not be scored")]
    ScoreFailures { failed: usize, total: usize },
    #[error("gradient check failed: max relative error {max_rel_err:e} exceeds {tol:e}")]
    GradCheckFailed { max_rel_err: f64, tol: f64 },
    #[error("gradient check inconclusive: {0}")]
    Inconclusive(String),
}

fn context(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default()
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const PARSE: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const NUMERIC: i32 = 5;
    pub const IO: i32 = 6;
    pub const INCONCLUSIVE: i32 = 7;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cdcm::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core { source, .. } => match source {
                E::Parse { .. } => exit::PARSE,
                E::NonFinite(_) => exit::NUMERIC,
                E::NearKink { .. } => exit::INCONCLUSIVE,
                _ => exit::VALIDATION,
            },
            CliError::Io { .. } => exit::IO,
            CliError::ScoreFailures { .. } => exit::VALIDATION,
            CliError::GradCheckFailed { .. } => exit::NUMERIC,
            CliError::Inconclusive(_) => exit::INCONCLUSIVE,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_owned(), source }
    }

    pub fn in_file(path: &Path, source: cdcm::Error) -> Self {
        CliError::Core { path: Some(path.to_owned()), source }
    }
}

impl From<cdcm::Error> for CliError {
    fn from(source: cdcm::Error) -> Self {
        CliError::Core { path: None, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

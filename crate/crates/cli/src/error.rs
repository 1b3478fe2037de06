use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for a configuration problem.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status when a NaN or infinity shows up.
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] supforge::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::UnknownKey(_) | CliError::BadValue { .. } => EXIT_CONFIG,
            CliError::Core(supforge::Error::Config(_) | supforge::Error::Divisibility { .. }) => EXIT_CONFIG,
            CliError::Numeric(_) | CliError::Core(supforge::Error::NonFinite(_)) => EXIT_NUMERIC,
            _ => EXIT_OTHER,
        }
    }
}

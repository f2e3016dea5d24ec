use std::path::PathBuf;

use spatial_bias::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("missing {role} column {column:?} (header has: {available})")]
    Schema { role: String, column: String, available: String },

    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Parse { row: usize, column: String, value: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(CoreError::from(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::from(e))
    }
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 2 for invalid input, 3 for numerical failure, 1 for I/O trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(CoreError::TooManyFailures { .. }) => 3,
            CliError::Core(CoreError::Io(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Schema { .. } | CliError::Parse { .. } | CliError::Config(_) => 2,
            CliError::File { .. } | CliError::Io(_) => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Every variant maps onto one of the CLI exit classes through
/// [`GeaError::exit_code`].
#[derive(Debug, Error)]
pub enum GeaError {
    /// Caller passed arguments that violate an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Input data failed validation (manifest, feature file, config).
    #[error("validation failed: {0}")]
    Validation(String),
    /// A file could be read but not parsed.
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    /// NaN, infinity or a zero norm where a finite nonzero value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = GeaError> = std::result::Result<T, E>;

impl GeaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        GeaError::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            GeaError::Argument(_) | GeaError::Validation(_) | GeaError::Parse { .. } => 2,
            GeaError::Numeric(_) => 3,
            GeaError::Io { .. } => 4,
        }
    }

    /// Short machine-parseable class tag used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            GeaError::Argument(_) => "E_ARGUMENT",
            GeaError::Validation(_) => "E_VALIDATION",
            GeaError::Parse { .. } => "E_PARSE",
            GeaError::Numeric(_) => "E_NUMERIC",
            GeaError::Io { .. } => "E_IO",
        }
    }
}

macro_rules! bail_arg {
    ($($t:tt)*) => { return Err($crate::error::GeaError::Argument(format!($($t)*))) };
}
pub(crate) use bail_arg;

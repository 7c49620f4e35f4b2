use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of the command-line driver, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid `{key}`: {reason}")]
    Validation { key: String, reason: String },

    #[error(transparent)]
    Numerical(phbeam::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn validation(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Validation {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Model errors with the offending key prefixed by the config block.
    pub fn model(block: &str, err: phbeam::Error) -> Self {
        use phbeam::Error as E;
        match err {
            E::InvalidParameter { name, reason } => CliError::validation(format!("{block}.{name}"), reason),
            E::CasimirStructure(reason) => CliError::validation(format!("{block}.r"), reason),
            E::InvalidGrid(reason) => CliError::validation("grid.nodes", reason),
            E::Resolution { .. } | E::Singular(_) | E::Assembly { .. } => CliError::Numerical(err),
            other => CliError::validation(block, other.to_string()),
        }
    }

    /// 2 for bad input, 3 for guard or solver failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

impl From<phbeam::Error> for CliError {
    fn from(err: phbeam::Error) -> Self {
        CliError::model("model", err)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid inputs: malformed config, out-of-range values, bad CSV, shape
    /// mismatches in user-supplied data. Maps to exit code 2.
    #[error("validation: {0}")]
    Validation(String),

    /// A required artifact (checkpoint, dataset, basis file) does not exist
    /// or has the wrong version. Maps to exit code 3.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// Training produced a non-finite loss or a mode-collapse guard fired.
    /// Maps to exit code 4.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingPrerequisite(msg.into())
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::Divergence(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI. 0 is success and never produced here.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Toml(_) => 2,
            Error::MissingPrerequisite(_) => 3,
            Error::Divergence(_) => 4,
            // I/O and serialization failures are treated as validation-class
            // problems: the user pointed us at something unusable.
            Error::Io { .. } | Error::Json(_) => 2,
        }
    }
}

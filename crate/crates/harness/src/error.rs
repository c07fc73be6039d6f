use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The configuration or an input document is malformed or inconsistent.
    #[error("config error in {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] prior_forge_core::Error),

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),

    #[error("{0}")]
    Failed(String),
}

impl HarnessError {
    pub fn config(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        HarnessError::Parse {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 for configuration and parse errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Parse { .. } => 2,
            HarnessError::Core(prior_forge_core::Error::GenomeParse { .. }) => 2,
            _ => 1,
        }
    }
}

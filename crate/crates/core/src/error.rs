use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// The variants are grouped so that callers (the CLI in particular) can map
/// them onto coarse exit classes: configuration/parse problems, numerical
/// failures, and the "empty PDE" outcome of pruning.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Several independent validation failures collected before any compute.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("parse error at {position}: {message}")]
    Parse { position: String, message: String },

    #[error("domain error at node {node}: {message}")]
    Domain { node: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty PDE: every right-hand-side term was pruned ({0})")]
    EmptyPde(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(position: impl ToString, message: impl Into<String>) -> Self {
        Error::Parse {
            position: position.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that are the user's fault (bad input, bad files).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Io { .. }
        )
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("not enough items of class {class}: requested {requested}, available {available}")]
    Capacity {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss is not finite)")]
    Divergence { epoch: usize, batch: usize },

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure: {msg} (condition estimate {condition:.3e})")]
    Numerical { msg: String, condition: f64 },

    #[error("degenerate fusion: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code used by the command line driver.
    ///
    /// 2 config, 3 data, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Format { .. }
            | Error::Structure(_)
            | Error::Dimension { .. }
            | Error::Capacity { .. }
            | Error::Io { .. } => 3,
            Error::Numerical { .. }
            | Error::Divergence { .. }
            | Error::Degenerate(_)
            | Error::Domain(_) => 4,
            Error::Member { source, .. } => source.exit_code(),
        }
    }
}

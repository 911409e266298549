use std::collections::BTreeMap;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate rotation: quaternion norm {0:e}")]
    DegenerateRotation(f64),

    /// A loss component became NaN or infinite.
    #[error("training diverged: non-finite loss components {0:?}")]
    Divergence(BTreeMap<String, f64>),

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            Error::Io(_) | Error::Format { .. } => 4,
            _ => 2,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MsctError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MsctError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    Numerical { op: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl MsctError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MsctError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        MsctError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MsctError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by invalid configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, MsctError::Config(_))
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer received operands whose dimensions do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid hyperparameters (FR module divisibility, kernel sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Network graph failed to build; `node` names the offending layer.
    #[error("build error at node {node}: {detail}")]
    Build { node: String, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A computed value went NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Analytic and finite-difference gradients disagree.
    #[error("gradient check failed: {0}")]
    Gradient(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("weights file: {0}")]
    Weights(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            line,
            detail: detail.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

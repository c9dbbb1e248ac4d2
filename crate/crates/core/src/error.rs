use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error for patient {patient}: {message}")]
    Data { patient: String, message: String },

    #[error("function {function} references gene {index} but the expression vector has {n_genes} genes")]
    GeneOutOfRange {
        function: String,
        index: usize,
        n_genes: usize,
    },

    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(patient: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            patient: patient.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: msg.into(),
        }
    }
}

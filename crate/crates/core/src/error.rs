use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while building problems, evaluating objectives or running solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An exponent `u_i + v_j - c_ij` left the representable range.
    #[error("exponent overflow at ({row}, {col}): exponent {exponent:.3e} exceeds {limit}")]
    Overflow {
        row: usize,
        col: usize,
        exponent: f64,
        limit: f64,
    },

    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("zero {axis} margin at index {index}")]
    ZeroMargin { axis: &'static str, index: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bootstrap failed: {dropped} of {total} replicates could not be fitted")]
    Bootstrap { dropped: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::InvalidProblem(_)
                | Error::NegativeEntry { .. }
                | Error::ZeroMargin { .. }
                | Error::Parse { .. }
        )
    }
}

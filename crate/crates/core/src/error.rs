use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value violates a documented constraint.
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("position {position:?} lies outside {region}")]
    OutsideRegion { position: [f64; 3], region: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("system matrix is rank deficient: rank {rank} < {unknowns} unknowns")]
    RankDeficient { rank: usize, unknowns: usize },

    #[error("decoupled block {block} is singular: rank {rank} < {unknowns} unknowns")]
    SingularBlock { block: usize, rank: usize, unknowns: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. } | Error::SingularBlock { .. } | Error::Numerical(_)
        )
    }
}

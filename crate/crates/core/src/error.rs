use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape in {op}: {lhs:?} vs {rhs:?}")]
    InvalidShape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis in {op}: axis {axis} for a {ndim}-d tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid probability map: {0}")]
    InvalidProbability(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,
    #[error("invalid image pair: {lhs} vs {rhs} values")]
    InvalidPair { lhs: usize, rhs: usize },
    #[error("invalid budget: {budget} requested from a pool of {available}")]
    InvalidBudget { budget: usize, available: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

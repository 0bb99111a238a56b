use std::path::PathBuf;

use crate::mem::MemModel;

/// Errors raised anywhere in the analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("column {column} is constant and cannot be binarized")]
    DegenerateColumn { column: usize },

    #[error("capacity exceeded: {n} units (maximum {max})")]
    Capacity { n: usize, max: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("fit did not converge after {iterations} iterations (max gradient {max_gradient:e})")]
    NonConvergence {
        iterations: usize,
        max_gradient: f64,
        partial: Box<MemModel>,
    },

    #[error("unit {unit} has degenerate empirical mean {mean}")]
    DegenerateMoment { unit: usize, mean: f64 },

    #[error("envelope undefined: no local {0} found")]
    EmptyExtrema(&'static str),

    #[error("empty sample")]
    EmptySample,

    #[error("group {0} has no members")]
    EmptyGroup(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("every model fit was rejected: {0}")]
    AllFitsRejected(String),

    #[error("missing intermediate: {0}")]
    MissingIntermediate(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

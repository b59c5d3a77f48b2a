//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Array shapes incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller-side contract was violated (non-scalar loss, index out
    /// of range, non-simplex input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Normalization statistics missing or degenerate.
    #[error("stats error: {0}")]
    Stats(String),

    /// Invalid model/run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Embedding-table index beyond declared capacity.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed kinematic tree (cycle, multiple roots, unknown parent).
    #[error("structure error: {0}")]
    Structure(String),

    /// Bad model input (unnormalized values, missing future actions, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Planner could not produce a finite update.
    #[error("planner error: {0}")]
    Planner(String),

    /// Checkpoint file malformed or version mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss).
    #[error("training error: {0}")]
    Training(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

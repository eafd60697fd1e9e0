use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violated ({invariant}) in cell {cell_id}{}", cycle_suffix(*.cycle_index))]
    Invariant {
        invariant: &'static str,
        cell_id: String,
        cycle_index: Option<u32>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("did not converge after {iterations} iterations (last change {last_delta:e})")]
    NotConverged { iterations: usize, last_delta: f64 },

    #[error("cannot bracket target end-of-life {target_eol}: {reason}")]
    Bracket { target_eol: u32, reason: String },

    #[error("model document error: {0}")]
    ModelFormat(String),
}

fn cycle_suffix(cycle: Option<u32>) -> String {
    match cycle {
        Some(c) => format!(", cycle {c}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (divergence, non-convergence)
    /// rather than by the data or the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NotConverged { .. } | Error::Bracket { .. }
        )
    }
}

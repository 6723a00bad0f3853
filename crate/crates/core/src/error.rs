use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solver, its instantiations and the experiment runner.
#[derive(Debug, Error)]
pub enum GdtError {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("matrix data has length {got}, expected {expected}")]
    InvalidData { expected: usize, got: usize },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("truncated SVD did not converge after {sweeps} sweeps (residual {residual:e}); matrix is likely ill-conditioned near rank {rank}")]
    SvdNotConverged {
        rank: usize,
        sweeps: usize,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("objective diverged at iteration {iteration}: {objective:e} exceeds 10x the initial value {initial:e}")]
    Diverged {
        iteration: usize,
        objective: f64,
        initial: f64,
    },

    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} runs failed; first error: {first}")]
    ReplicationsFailed {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GdtError> = std::result::Result<T, E>;

impl GdtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdtError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the shape-model and identification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    ConvergenceFailure { sweeps: usize, off_norm: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("landmark count mismatch: {left} vs {right}")]
    CorrespondenceMismatch { left: usize, right: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),

    #[error("weight {index} = {value} is outside [-{bound}, {bound}]")]
    WeightOutOfBounds { index: usize, value: f64, bound: f64 },

    #[error("weight vector has {got} entries, model has {expected} modes")]
    WeightLength { expected: usize, got: usize },

    #[error("instance table would hold {requested} instances (cap {cap})")]
    TableTooLarge { requested: u128, cap: usize },

    #[error("instance table is empty")]
    EmptyTable,

    #[error("mesh has {vertices} vertices, at least {required} required")]
    MeshTooSparse { vertices: usize, required: usize },

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("invalid quadrant spec: {0}")]
    InvalidQuadrantSpec(String),

    #[error("quadrant partition error: {0}")]
    QuadrantPartition(String),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("window has {got} frames, model lookback is {expected}")]
    WindowShape { expected: usize, got: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{}line {line}: {message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse {
        path: Option<PathBuf>,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: None,
            line,
            message: message.into(),
        }
    }

    pub(crate) fn with_path(self, path: &std::path::Path) -> Self {
        match self {
            Error::Parse { line, message, .. } => Error::Parse {
                path: Some(path.to_path_buf()),
                line,
                message,
            },
            other => other,
        }
    }
}

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-manifold edges under cotangent weighting: {0:?}")]
    NonManifoldEdges(Vec<(usize, usize)>),

    #[error("coincident vertices at indices {0} and {1}")]
    CoincidentVertices(usize, usize),

    #[error("eigensolver did not converge after {iterations} iterations; residuals {residuals:?}")]
    EigenNonConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

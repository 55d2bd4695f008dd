use thiserror::Error;

use crate::inner::SolveReport;

pub type Result<T, E = TiltError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TiltError {
    #[error("matrix contains non-finite entries ({context})")]
    NonFinite { context: &'static str },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("Gram matrix of the Jacobian is singular or ill-conditioned")]
    SingularJacobian,

    #[error("degenerate problem: projected data has zero norm")]
    DegenerateProblem,

    #[error("degenerate window: patch has zero norm")]
    DegenerateWindow,

    #[error("warped window leaves the image (sample at x={x:.2}, y={y:.2})")]
    WindowEscape { x: f64, y: f64 },

    #[error("solver diverged after {} iterations", report.iterations)]
    Divergence { report: Box<SolveReport> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

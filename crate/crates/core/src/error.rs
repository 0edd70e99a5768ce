use thiserror::Error;

/// Errors raised by the numerical kernels and the experiment driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge in {operation}: best value {best_re:+.6e}{best_im:+.6e}i, estimated error {est_error:.3e} (budget {panels} panels)")]
    Nonconvergence {
        operation: String,
        best_re: f64,
        best_im: f64,
        est_error: f64,
        panels: usize,
    },

    #[error("phase magnitude {magnitude:.3e} exceeds the compensated-arithmetic ceiling {ceiling:.1e} in {operation}")]
    PrecisionLoss {
        operation: String,
        magnitude: f64,
        ceiling: f64,
    },

    #[error("degenerate stage k={k}: lattice range ({lo:.6}, {hi:.6}) contains no integer")]
    DegenerateStage { k: usize, lo: f64, hi: f64 },

    #[error("kernel is undefined at t = 0")]
    DomainError,

    #[error("schedule overflow: {0}")]
    Overflow(String),

    #[error("tail truncation could not be certified: {0}")]
    TailCertification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

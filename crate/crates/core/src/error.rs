use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel undefined for t <= tau (t = {t}, tau = {tau})")]
    DegenerateInterval { t: f64, tau: f64 },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("quadrature did not converge: requested {requested:e}, achieved {achieved:e}")]
    QuadratureTolerance { requested: f64, achieved: f64 },

    #[error("integral diverges under refinement ({0})")]
    Divergent(String),

    #[error("Picard iteration did not contract after {iterations} iterations (last ratio {ratio})")]
    NoContraction { iterations: usize, ratio: f64 },

    #[error("time step violates stability bound: {0}")]
    CflViolation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed table file: {0}")]
    TableFormat(String),
}

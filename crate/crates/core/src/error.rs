use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EitError {
    #[error("point ({x1}, {x2}) coincides with the dipole source at phi = {phi}")]
    SourceSingularity { x1: f64, x2: f64, phi: f64 },
    #[error("invalid anomaly: {0}")]
    InvalidAnomaly(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid measurement data: {0}")]
    InvalidData(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("data out of range: {0}")]
    OutOfRange(String),
    #[error("ambiguous inversion: interior candidates {first:?} and {second:?}")]
    Ambiguous { first: [f64; 2], second: [f64; 2] },
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
}

pub type Result<T> = std::result::Result<T, EitError>;

use thiserror::Error;

/// Errors raised by the simulation, fitting and control layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("axis vector is not unit norm (|n| = {0})")]
    NonUnitAxis(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("operation not defined for this surface cut: {0}")]
    UnsupportedSurface(String),
    #[error("bench command failed: {0}")]
    Bench(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("log schema violation at line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

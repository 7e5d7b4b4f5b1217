use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("malformed model: {0}")]
    Model(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("point is not in the uncertainty set: {0}")]
    OffPolytope(String),
    #[error("enumeration guard exceeded: {0}")]
    Guard(String),
    #[error("unknown distribution `{0}`")]
    UnknownDistribution(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

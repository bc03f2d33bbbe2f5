//! Crate-wide error type.

/// Errors produced by population construction, sampling, fitting and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("argument outside the carrier domain")]
    DomainViolation,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("root not bracketed: {0}")]
    RootNotBracketed(String),

    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

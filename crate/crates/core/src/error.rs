//! Crate-wide error type. Fallible constructors and operations return
//! [`Result`] so callers can distinguish structural mistakes (dimensions),
//! domain violations (negative powers, zero rates), bad configuration, and
//! genuine infeasibility of an optimization instance.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched lengths, empty inputs, or out-of-range indices.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Configuration rejected before any computation ran.
    #[error("config error: {0}")]
    Config(String),
    /// The requested constraint set has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// Every enumerated round-count pair failed, with one reason per pair.
    #[error("no feasible round pair: {}", reasons.join("; "))]
    AllPairsInfeasible { reasons: Vec<String> },
    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Structured-text parse failure (config files, log records).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

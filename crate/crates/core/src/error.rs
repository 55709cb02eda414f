//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error. Variants map onto the CLI exit-code classes:
/// `Dimension`/`Contract`/`Parse`/`Io` are data or contract failures,
/// `Numeric` is a numeric failure.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value or otherwise failed numerically.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed input data (bad CSV row, bad JSON line, ...).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// True for the variants that count as data/contract errors at the CLI boundary.
    pub fn is_contract(&self) -> bool {
        !matches!(self, Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("enumeration infeasible: {vocab}^{horizon} sequences exceeds the cap of {cap}")]
    EnumerationInfeasible {
        vocab: usize,
        horizon: usize,
        cap: u64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: u64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or shape mismatch between operands.
    #[error("configuration error: {0}")]
    Config(String),
    /// A softmax row had no allowed entry.
    #[error("invalid mask: row {row} has no allowed entry")]
    InvalidMask { row: usize },
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An event log or ledger is internally inconsistent.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::Error::Config(alloc::format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::Error::Contract(alloc::format!($($arg)*))
    };
}

pub(crate) use {config_err, contract_err};

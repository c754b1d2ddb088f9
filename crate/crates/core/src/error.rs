use alloc::string::String;
use core::fmt;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument violated a documented precondition.
    InvalidInput(String),
    /// A Gaussian's covariance cannot be inverted.
    DegenerateCovariance,
    /// Geometry that makes a projection or quantile undefined.
    DegenerateGeometry(String),
    /// Inconsistent hyperparameters or tensor shapes.
    Config(String),
    /// An operation needed state that was not recorded.
    State(String),
    /// Training produced a non-finite loss.
    NonFinite { iteration: usize, diagnostic: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::DegenerateCovariance => f.write_str("degenerate covariance"),
            Error::DegenerateGeometry(msg) => write!(f, "degenerate geometry: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::NonFinite { iteration, diagnostic } => {
                write!(f, "non-finite loss at iteration {iteration}: {diagnostic}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::Error::InvalidInput(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use invalid;

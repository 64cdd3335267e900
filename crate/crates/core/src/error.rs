use alloc::string::String;

/// Errors raised by the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A training loss became non-finite.
    #[error("training diverged at step {step}: {what} = {value}")]
    Divergence {
        step: u64,
        what: &'static str,
        value: f64,
    },
    /// A numerical routine failed (e.g. a singular covariance).
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail_validation {
    ($($arg:tt)*) => {
        return Err($crate::Error::Validation(alloc::format!($($arg)*)))
    };
}

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        $crate::Error::Shape { op: $op, detail: alloc::format!($($arg)*) }
    };
}

pub(crate) use bail_validation;
pub(crate) use shape_err;

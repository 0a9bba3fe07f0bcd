use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the model core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A precondition of an operation does not hold.
    Contract(String),
    /// A parameter name was not found in the store.
    UnknownParam(String),
    /// A gradient contained a non-finite value.
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: dimension mismatch between {left:?} and {right:?}")
            }
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::UnknownParam(name) => write!(f, "unknown parameter `{name}`"),
            Error::NonFinite(name) => write!(f, "non-finite gradient for parameter `{name}`"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

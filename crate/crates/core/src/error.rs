use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found shape {found:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        found: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss node must be scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

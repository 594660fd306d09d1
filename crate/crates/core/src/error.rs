use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {}x{}, right is {}x{}", .left.0, .left.1, .right.0, .right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{0}: matrix is empty")]
    Empty(&'static str),

    #[error("{0}: removal would leave an empty matrix")]
    WouldEmpty(&'static str),

    #[error("backward called on a node that was never recorded on this tape")]
    UnknownNode,

    #[error("backward already ran on this tape")]
    AlreadyDifferentiated,

    #[error("loss must be a 1x1 node, got {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("target id {target} outside vocabulary of size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("calibration batch is empty")]
    EmptyBatch,

    #[error("no importance records to rank")]
    EmptyRecords,

    #[error("pair {0} has an all-zero score vector")]
    DegeneratePair(String),

    #[error("removing from pair {pair} would drop its inner dimension below {floor}")]
    BelowFloor { pair: String, floor: usize },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("SVD did not converge")]
    SvdNoConvergence,

    #[error("target of {target} parameters is unreachable; the floor allows at best {min_achievable}")]
    BudgetInfeasible { target: usize, min_achievable: usize },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

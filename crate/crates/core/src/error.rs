use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("partition size {p} does not divide world size {n}")]
    NonDivisible { n: usize, p: usize },

    #[error("{what} = {value} is out of range ({expected})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        expected: &'static str,
    },

    #[error("model states of {required} bytes do not fit: {reason}")]
    Infeasible { required: u64, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("type mismatch: {0}")]
    TypeMismatch(String),

    #[error("schedule boundary violation: micro_step {micro_step} of {s} ({op})")]
    BoundaryViolation {
        op: &'static str,
        micro_step: usize,
        s: usize,
    },

    #[error("bandwidth profile has no table entries")]
    EmptyProfile,

    #[error("invalid cluster: {0}")]
    InvalidCluster(String),

    #[error("domain error: {0}")]
    Domain(String),
}

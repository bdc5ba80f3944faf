use thiserror::Error;

use crate::models::ConditionId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("patch size {patch} does not divide a {height}x{width} map")]
    NonDivisiblePatch {
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("top-k value {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("unknown condition {0}")]
    UnknownCondition(ConditionId),
    #[error("timestep {t} outside 0..={total}")]
    InvalidTimestep { t: usize, total: usize },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory was sampled without recording weights")]
    MissingWeights,
    #[error("noise schedules disagree: {0}")]
    ScheduleMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

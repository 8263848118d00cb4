//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing key `{0}` in configuration")]
    MissingKey(String),

    #[error("configuration parse error: {0}")]
    ConfigParse(String),

    #[error("dimension mismatch for `{field}`: expected {expected}, got {got}")]
    DimensionMismatch {
        field: String,
        expected: String,
        got: String,
    },

    #[error("`{field}` at grid step {step} is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite {
        field: String,
        step: usize,
        min_eig: f64,
    },

    #[error("model validation failed: {0} violation(s); first: {1}")]
    Invalid(usize, String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid ambiguity bound: {0}")]
    InvalidAmbiguity(String),

    #[error("theta bound violation at step {step}: |{value}| > mu = {mu}")]
    BoundViolation { step: usize, value: f64, mu: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("theta path is not adapted to the observation filtration")]
    NotAdapted,

    #[error("penalty domain violation: concave dual is -inf at step {step}")]
    DomainViolation { step: usize },

    #[error("ambiguity bound mu = {mu} exceeds the dual's admissible box radius {radius}")]
    MuOutsideDomain { mu: f64, radius: f64 },

    #[error("operation requires a scalar model (n = m = 1), got n = {n}, m = {m}")]
    NotScalar { n: usize, m: usize },

    #[error("operation requires a reference-measure batch (simulated with theta = 0)")]
    NotReferenceBatch,

    #[error("convex operator is not proper: density {index} has a non-positive entry")]
    NotProper { index: usize },

    #[error("brute-force search supports at most {max} blocks, got {got}")]
    TooManyBlocks { max: usize, got: usize },

    #[error("invalid finite-space input: {0}")]
    InvalidFiniteSpace(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

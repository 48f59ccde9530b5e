//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("state not normalizable: norm {norm} outside the renormalization window")]
    NotNormalizable { norm: f64 },

    #[error("digit {digit} out of range for site {site} (dimension {dim})")]
    DigitOutOfRange { site: usize, digit: usize, dim: usize },

    #[error("flat index {index} out of range for register of dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("register dimension {requested} exceeds the configured maximum {max}")]
    CapacityExceeded { requested: usize, max: usize },

    #[error("operator is not unitary (max deviation {deviation:.3e})")]
    NonUnitary { deviation: f64 },

    #[error("projector family is not complete and orthogonal (max deviation {deviation:.3e})")]
    IncompleteProjectorFamily { deviation: f64 },

    #[error("forced branch {outcome} has probability below 1e-12")]
    ZeroProbabilityBranch { outcome: usize },

    #[error("bad dimension {dim}")]
    BadDimension { dim: usize },

    #[error("bad Bell outcome ({m},{n}) for dimension {dim}")]
    BadOutcome { m: usize, n: usize, dim: usize },

    #[error("bad sender index {index} (protocol has {count} senders)")]
    BadSenderIndex { index: usize, count: usize },

    #[error("bad receiver index {index} (protocol has {count} receivers)")]
    BadReceiverIndex { index: usize, count: usize },

    #[error("invalid protocol configuration: {0}")]
    ConfigInvalid(String),

    #[error("branch enumeration would produce {count} branches (limit {max})")]
    BranchExplosion { count: u64, max: u64 },

    #[error("no phase convention reproduces every branch exactly")]
    NoConsistentConvention,

    #[error("{survivors} phase conventions survive the pinning procedure; expected one")]
    AmbiguousConvention { survivors: usize },

    #[error("message round {round} regresses below {last}")]
    RoundRegression { round: usize, last: usize },

    #[error("transcript does not replay against this configuration: {0}")]
    TranscriptMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

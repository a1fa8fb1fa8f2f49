use thiserror::Error;

#[derive(Debug, Error)]
pub enum LadsError {
    #[error("{what} = {value} exceeds the 32-bit seed-encoding domain")]
    DomainOverflow { what: &'static str, value: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("mixing coefficient {0} is outside [0, 1]")]
    InvalidAlpha(f64),

    #[error("invalid bucket model: {0}")]
    InvalidBucketModel(String),

    #[error("bucket model has no centers")]
    EmptyCenters,

    #[error("operation requires {expected} mode")]
    WrongMode { expected: &'static str },

    #[error("invalid account id: {0}")]
    InvalidAccount(String),

    #[error("account {account} reached the per-stage cap of {cap} requests")]
    QuotaExceeded { account: String, cap: u64 },

    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("unsupported snapshot version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("expected count {expected:.3} in category {category} is below 5")]
    ExpectedCountTooSmall { category: usize, expected: f64 },

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("non-finite loss after {step} optimizer steps")]
    NonFiniteLoss { step: usize },

    #[error("optimizer diverged: {0}")]
    OptimizerDivergence(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LadsError>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid base process: {0}")]
    InvalidProcess(String),

    #[error("psi-mixing undefined: periodic or reducible chain")]
    NotPrimitive,

    #[error("zero-probability stationary state {0}: time reversal undefined")]
    ZeroStationaryMass(usize),

    #[error("branch does not cover [0,1): {0}")]
    BranchCoverage(String),

    #[error("invalid map parameters: {0}")]
    InvalidMap(String),

    #[error("state {0} outside [0,1)")]
    Domain(f64),

    #[error("no expanding branches (q = {q}, d = {d})")]
    NoExpandingBranches { q: usize, d: usize },

    #[error("claimed expanding branch not expanding (eta = {0})")]
    NotExpanding(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("insufficient past: need k_past >= {required}, path has {available}")]
    InsufficientPast { required: usize, available: usize },

    #[error("index window overflow: indices {from}..{to} not inside path window {lo}..={hi}")]
    Window { from: i64, to: i64, lo: i64, hi: i64 },

    #[error("observable is not centered: center first")]
    NotCentered,

    #[error("missing index {0}")]
    MissingIndex(i64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance matrix not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("slow state became non-finite at step {step}")]
    NonFinite { step: usize },

    #[error("decay regime precondition unmet: {0}; standard tightness criteria might fail outside the uniform decay regime")]
    DecayRegime(String),
}

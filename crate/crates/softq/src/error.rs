use thiserror::Error;

/// Errors produced by the softq library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no convergence after {iters} iterations (residual {residual:e})")]
    NoConvergence { residual: f64, iters: usize },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,

    #[error("empty {0} batch")]
    EmptyBatch(&'static str),

    #[error("demo file error at line {line}: {msg}")]
    DemoFormat { line: usize, msg: String },

    #[error("demo environment hash mismatch: demos were generated on {found:#018x}, expected {expected:#018x}")]
    EnvHashMismatch { expected: u64, found: u64 },

    #[error("unknown environment fixture `{0}` (expected grid5, grid1x2, or layered:LxSxA:SEED)")]
    UnknownFixture(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; run aborted")]
    NonFiniteLoss { step: usize },

    #[error("internal numerical inconsistency: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

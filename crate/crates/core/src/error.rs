use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular DDIM step at t={t}: alpha_t is zero")]
    Singularity { t: usize },

    #[error("degenerate source embedding: token {token} of batch {batch} has zero norm")]
    DegenerateSource { batch: usize, token: usize },

    #[error("parameter path sets differ: {0:?}")]
    PathMismatch(Vec<String>),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("invalid strategy spec: {0}")]
    StrategySpec(String),

    #[error("not found: {0}")]
    NotFound(String),
}

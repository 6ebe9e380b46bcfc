use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid factored space: {0}")]
    InvalidSpace(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("partitions cover different node counts ({0} vs {1})")]
    NodeCountMismatch(usize, usize),

    #[error("transitions belong to different factored spaces")]
    SpaceMismatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("count {base}^{exp} does not fit in a signed 64-bit integer")]
    Overflow { base: u64, exp: u32 },

    #[error("mask provider failed: {0}")]
    Provider(String),

    #[error("missing position metadata for component {0}")]
    MissingPosition(usize),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("activation {0} has no derivative bound of 1")]
    UnsupportedActivation(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("rollout produced a non-finite prediction at step {0}")]
    NonFiniteRollout(usize),

    #[error("restricted structural function is ill-defined on the subspace for variable {0}")]
    IllDefinedRestriction(usize),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

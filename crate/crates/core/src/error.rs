use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("width {width} is not divisible by {heads} heads")]
    HeadDivisibility { width: usize, heads: usize },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} out of range [0, {total})")]
    TimestepOutOfRange { t: usize, total: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at step {step}; activation norms: {norms}")]
    NonFiniteLoss { step: usize, norms: String },

    #[error("checkpoint entry `{entry}`: {reason}")]
    CheckpointEntry { entry: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("import: {0}")]
    Import(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

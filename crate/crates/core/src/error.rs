use thiserror::Error;

pub type Result<T> = std::result::Result<T, PlantsError>;

#[derive(Debug, Error)]
pub enum PlantsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: value out of domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "series length {len} is too short for period detection (need at least 9); pass explicit windows instead"
    )]
    SeriesTooShort { len: usize },

    #[error("no dominant period found; pass explicit windows (suggested window: {suggested_window})")]
    NoPeriods { suggested_window: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PlantsError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        PlantsError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PlantsError::Invalid(msg.into())
    }
}

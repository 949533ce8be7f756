use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("utterance `{0}` has no gold label")]
    MissingGoldLabel(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("batch of size {actual} is too small (need at least {min})")]
    BatchTooSmall { min: usize, actual: usize },

    #[error("degenerate representation: {0}")]
    DegenerateRepresentation(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("not enough points: {points} points for {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("classifier head {0} does not exist")]
    MissingHead(usize),

    #[error("no retained head matches the snapshot label space")]
    MissingRetainedHead,

    #[error("label space mismatch: {0}")]
    LabelSpaceMismatch(String),

    #[error("stage ordering violated: {0}")]
    StageOrder(String),

    #[error("non-finite loss in {stage} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
    },

    #[error("invalid feedback: {0:?}")]
    InvalidFeedback(alloc::vec::Vec<crate::discovery::Violation>),

    #[error("session is {0:?}; operation not allowed")]
    InvalidStatus(crate::discovery::SessionStatus),
}

pub type Result<T> = core::result::Result<T, Error>;

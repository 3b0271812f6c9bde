use thiserror::Error;

use crate::nn::ActivityId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown activity {0}")]
    UnknownActivity(ActivityId),

    #[error("duplicate activity {0}")]
    DuplicateActivity(ActivityId),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stale forward cache: model version {model} but cache recorded {cache}")]
    StaleCache { model: u64, cache: u64 },

    #[error("learning-rate schedule queried at round {round} beyond total {total}")]
    RoundOutOfRange { round: usize, total: usize },

    #[error("cannot select {requested} clients from a pool of {available}")]
    TooManyClients { requested: usize, available: usize },

    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("models are not aggregation-compatible: {0}")]
    Incompatible(String),

    #[error("missing targets for activity {0}")]
    MissingTargets(ActivityId),

    #[error("activity {0} is not served by any model")]
    Unserved(ActivityId),

    #[error("activity {0} is served by more than one model")]
    MultiplyServed(ActivityId),

    #[error("self-affinity needs at least two activities")]
    SingleActivity,

    #[error("no affinity rounds to finalize")]
    NoAffinityRounds,

    #[error("split count {m} out of range for {n} activities")]
    SplitCount { m: usize, n: usize },

    #[error("activity {0} is not a member of the group")]
    NotInGroup(ActivityId),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("every group is a singleton; nothing to refine")]
    NothingToRefine,

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

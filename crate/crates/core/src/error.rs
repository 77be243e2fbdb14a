use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(
        "cache capacity precondition violated: capacity {capacity} < ceil({unique} unique features / {workers} workers) = {required}"
    )]
    CapacityPrecondition {
        capacity: usize,
        required: usize,
        unique: usize,
        workers: usize,
    },

    #[error(
        "cache capacity deadlock at step {step} on worker {worker}: need {shortfall} more slots \
         (capacity {capacity}, occupied {occupied}, pinned {pinned}, needed soon {needed_soon}) \
         and no in-flight batch is left to release"
    )]
    CapacityDeadlock {
        step: u64,
        worker: usize,
        capacity: usize,
        occupied: usize,
        pinned: usize,
        needed_soon: usize,
        shortfall: usize,
    },

    #[error("feature {feature} is owned by worker {worker} but not resident in its buffer")]
    NotResident { worker: usize, feature: u64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("pipeline stage `{0}` stopped unexpectedly")]
    StageDisconnected(&'static str),
}

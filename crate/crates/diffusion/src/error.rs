use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] ndgrad::Error),
    #[error("invalid schedule: need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]")]
    InvalidSchedule { steps: usize, beta_start: f64, beta_end: f64 },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("transition variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("cannot take {n_steps} sampling steps on a {max}-step schedule")]
    TooManySteps { n_steps: usize, max: usize },
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("adapter rank {rank} must satisfy 1 <= rank < {limit}")]
    InvalidAdapterRank { rank: usize, limit: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{what}: expected {expected} rows, got {got}")]
    BatchSize { what: &'static str, expected: usize, got: usize },
    #[error("pretraining diverged at step {step}: loss {loss} exceeded 10x the initial {initial} for 100 steps")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

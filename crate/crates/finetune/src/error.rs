use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fine-tuning config: {0}")]
    Config(String),
    #[error("batch has no rewards")]
    MissingRewards,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Diffusion(#[from] diffusion::Error),
    #[error(transparent)]
    Guidance(#[from] guidance::Error),
    #[error(transparent)]
    Rewards(#[from] rewards::Error),
    #[error(transparent)]
    Tensor(#[from] ndgrad::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;
use crate::runlog::CsvError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: diffusion::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: CsvError },
    #[error("checkpoint was trained for T={found}, config has T={expected}")]
    Horizon { expected: usize, found: usize },
    #[error("{0}")]
    Experiment(String),
    #[error(transparent)]
    Diffusion(#[from] diffusion::Error),
    #[error(transparent)]
    Guidance(#[from] guidance::Error),
    #[error(transparent)]
    Rewards(#[from] rewards::Error),
    #[error(transparent)]
    Finetune(#[from] finetune::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, CsvError> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })
    }
}

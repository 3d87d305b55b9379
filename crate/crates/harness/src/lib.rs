//! Configuration, metrics persistence, plotting and experiment recipes for
//! the toy exploration study, plus the `diffexp` command-line front end.

pub mod cli;
pub mod config;
mod error;
pub mod experiment;
pub mod plot;
pub mod runlog;
pub mod stats;

pub use config::{ConfigError, ExperimentConfig};
pub use error::{Error, Result};
pub use experiment::{Arm, EvalSummary, Experiment};

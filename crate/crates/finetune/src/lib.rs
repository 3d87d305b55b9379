//! Online reward fine-tuning of adapter parameters.
//!
//! Two update rules share one collection path: a clipped importance-weighted
//! policy gradient over the stochastic denoising steps, and direct
//! backpropagation of the reward through the reparameterized sampler. Only
//! adapter parameters are ever written; the base network is frozen.

mod config;
mod error;
mod rollout;
mod run;
mod update;

pub use config::{FineTuneConfig, Method};
pub use error::{Error, Result};
pub use rollout::{collect_batch, Batch, CollectRequest};
pub use run::{finetune, FineTuneOutcome, RunLogRow, RunSetup};
pub use update::{
    advantages, backprop_update, clipped_surrogate, ddpo_update, policy_gradient, reward_gradient, AdapterGradient, Surrogate,
    UpdateStats,
};

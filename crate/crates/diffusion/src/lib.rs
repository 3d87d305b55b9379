//! Toy conditional diffusion model on 2-D points.
//!
//! The forward process, noise-prediction network, strided ancestral sampler
//! and pretraining loop live here. Guidance is supplied to the sampler
//! through the [`Guide`] trait so that scheduling policies can be layered on
//! without this crate knowing about them.

pub mod checkpoint;
mod data;
mod error;
mod model;
mod optim;
mod sample;
mod schedule;
mod train;
mod vocab;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use data::{ToyDataset, ToyDatasetSpec};
pub use error::{Error, Result};
pub use model::{
    Adapter, DenoiserParams, Linear, ModelConfig, ParamGroup, Prediction, Slots, TimeBatch, ADAPTER_INIT_STD, DATA_DIM,
    TIME_FEATURES,
};
pub use optim::AdamW;
pub use sample::{
    ancestral_sample, stream_rng, ConditionalGuide, Guide, Reweight, Sample, SampleOptions, StepRecord, Trajectory,
};
pub use schedule::{gaussian_log_density, sample_transition, transition_mean, NoiseSchedule, StepConstants};
pub use train::{dm_loss, heldout_loss, noise_prediction_loss, pretrain, LossAndGrads, PretrainConfig, PretrainReport};
pub use vocab::{Condition, ConditionVocabulary, Token, MAX_TOKENS};

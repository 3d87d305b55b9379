use diffusion::{ancestral_sample, Condition, DenoiserParams, NoiseSchedule, SampleOptions, Trajectory};
use guidance::{GuidanceContext, GuidedBatch};
use rand::Rng;
use rewards::{RewardQueryCounter, RewardSpec};

use crate::error::{Error, Result};

/// Collected trajectories and, once scored, their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Option<Vec<f64>>,
    /// Guidance in force during collection; updates replay it exactly.
    pub context: GuidanceContext,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.trajectories.iter().map(|t| t.condition.clone()).collect()
    }

    pub fn mean_reward(&self) -> Option<f64> {
        self.rewards.as_ref().map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Inputs that fix one collection round.
#[derive(Debug, Clone, Copy)]
pub struct CollectRequest<'a> {
    pub sched: &'a NoiseSchedule,
    pub conditions: &'a [Condition],
    pub context: GuidanceContext,
    pub batch: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// First noise stream; trajectory `i` uses `first_stream + i`.
    pub first_stream: u64,
}

/// Draws `batch` conditions uniformly from the training list, samples one
/// trajectory each and scores it, advancing `counter` by `batch`.
pub fn collect_batch(
    params: &DenoiserParams,
    req: &CollectRequest<'_>,
    spec: &RewardSpec,
    counter: &RewardQueryCounter,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if req.conditions.is_empty() {
        return Err(Error::Config("no training conditions".into()));
    }
    let conds: Vec<Condition> = (0..req.batch)
        .map(|_| req.conditions[rng.gen_range(0..req.conditions.len())].clone())
        .collect();
    let guide = GuidedBatch::new(params, conds, req.context, rng)?;
    let streams: Vec<u64> = (0..req.batch as u64).map(|i| req.first_stream + i).collect();
    let sample = ndgrad::paused(|| {
        ancestral_sample(params, req.sched, req.n_steps, &guide, req.seed, &streams, SampleOptions::default())
    })?;
    let points: Vec<[f64; 2]> = sample.trajectories.iter().map(|t| t.x0).collect();
    let conds: Vec<Condition> = sample.trajectories.iter().map(|t| t.condition.clone()).collect();
    let rewards = counter.query(spec, &points, &conds)?;
    Ok(Batch {
        trajectories: sample.trajectories,
        rewards: Some(rewards),
        context: req.context,
    })
}

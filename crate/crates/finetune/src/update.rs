use diffusion::{
    ancestral_sample, gaussian_log_density, transition_mean, AdamW, Condition, DenoiserParams, Guide, NoiseSchedule,
    ParamGroup, SampleOptions,
};
use guidance::GuidedBatch;
use ndgrad::{Gradients, Tensor};
use rand::Rng;
use rewards::{RewardQueryCounter, RewardSpec};

use crate::config::FineTuneConfig;
use crate::error::{Error, Result};
use crate::rollout::{Batch, CollectRequest};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_reward: f64,
    /// Share of (trajectory, step) terms whose ratio left the clip interval.
    pub clip_fraction: f64,
    /// Largest `|ratio - 1|` seen in the first epoch.
    pub max_ratio_deviation: f64,
    pub grad_norm: f64,
}

/// `(r - mean) / (std + 1e-8)` with the population std, or `r` unchanged.
/// A constant batch gives all-zero advantages.
pub fn advantages(rewards: &[f64], normalize: bool) -> Vec<f64> {
    if !normalize || rewards.is_empty() {
        return rewards.to_vec();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// Clipped importance objective for one step across the batch.
#[derive(Debug, Clone)]
pub struct Surrogate {
    /// `-mean(min(ratio * A, clip(ratio) * A))`.
    pub loss: Tensor,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

pub fn clipped_surrogate(logp_new: &Tensor, logp_old: &[f64], adv: &[f64], clip: f64) -> Result<Surrogate> {
    let n = logp_old.len();
    if adv.len() != n || logp_new.numel() != n {
        return Err(Error::Config(format!(
            "surrogate inputs disagree: {} new log-probs, {n} old, {} advantages",
            logp_new.numel(),
            adv.len()
        )));
    }
    let old = Tensor::new(logp_old.to_vec(), &[n])?;
    let a = Tensor::new(adv.to_vec(), &[n])?;
    let ratio = logp_new.reshape(&[n])?.sub(&old)?.exp();
    let unclipped = ratio.mul(&a)?;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip).mul(&a)?;
    let loss = unclipped.minimum(&clipped)?.mean().neg();
    let deviations: Vec<f64> = ratio.data().iter().map(|r| (r - 1.0).abs()).collect();
    Ok(Surrogate {
        loss,
        clip_fraction: deviations.iter().filter(|d| **d > clip).count() as f64 / n as f64,
        max_ratio_deviation: deviations.iter().copied().fold(0.0, f64::max),
    })
}

fn adapter_grads(tracked: &DenoiserParams, grads: &Gradients) -> Vec<Vec<f64>> {
    tracked
        .group(ParamGroup::Adapter)
        .into_iter()
        .map(|t| grads.wrt_or_zeros(t).to_vec())
        .collect()
}

fn require_adapters(params: &DenoiserParams) -> Result<()> {
    if params.group(ParamGroup::Adapter).is_empty() {
        return Err(Error::Config("no adapters attached; fine-tuning only trains adapters".into()));
    }
    Ok(())
}

/// One optimizer step on the adapters; returns the gradient norm.
fn apply(params: &mut DenoiserParams, opt: &mut AdamW, grads: &[Vec<f64>]) -> Result<f64> {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("adapter gradient"));
    }
    let mut values = params.values(ParamGroup::Adapter);
    opt.step(&mut values, grads);
    params.set_values(ParamGroup::Adapter, values)?;
    Ok(norm)
}

fn rows(batch: &Batch, j: usize, pick: impl Fn(&diffusion::StepRecord) -> [f64; 2]) -> Result<Tensor> {
    let data: Vec<f64> = batch.trajectories.iter().flat_map(|t| pick(&t.steps[j])).collect();
    Ok(Tensor::new(data, &[batch.len(), 2])?)
}

/// Clipped policy-gradient update over every stochastic step of `batch`.
///
/// New log densities are taken under the guided transition the batch was
/// collected with: same per-step scale, same emphasised condition rows.
pub fn ddpo_update(
    params: &mut DenoiserParams,
    opt: &mut AdamW,
    batch: &Batch,
    sched: &NoiseSchedule,
    cfg: &FineTuneConfig,
) -> Result<UpdateStats> {
    let rewards = batch.rewards.as_ref().ok_or(Error::MissingRewards)?;
    require_adapters(params)?;
    if batch.is_empty() || rewards.len() != batch.len() {
        return Err(Error::MissingRewards);
    }
    let adv = advantages(rewards, cfg.normalize_advantages);
    let mut stats = UpdateStats {
        loss: 0.0,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        clip_fraction: 0.0,
        max_ratio_deviation: 0.0,
        grad_norm: 0.0,
    };
    for epoch in 0..cfg.epochs {
        let g = policy_gradient(params, batch, &adv, sched, cfg.clip)?;
        let norm = apply(params, opt, &g.grads)?;
        if epoch == 0 {
            stats.loss = g.loss;
            stats.max_ratio_deviation = g.max_ratio_deviation;
            stats.grad_norm = norm;
        }
        stats.clip_fraction += g.clip_fraction / cfg.epochs as f64;
    }
    Ok(stats)
}

/// Loss value and adapter gradients, in [`DenoiserParams::group`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

/// Gradient of the step-averaged clipped objective at the current adapters.
pub fn policy_gradient(
    params: &DenoiserParams,
    batch: &Batch,
    adv: &[f64],
    sched: &NoiseSchedule,
    clip: f64,
) -> Result<AdapterGradient> {
    let n_steps = batch.trajectories.first().map_or(0, |t| t.steps.len());
    if batch.trajectories.iter().any(|t| t.steps.len() != n_steps) {
        return Err(Error::Config("trajectories in a batch must share a step count".into()));
    }
    let conds = batch.conditions();
    let reweights: Vec<_> = batch.trajectories.iter().map(|t| t.reweights.clone()).collect();
    let (out, tape) = ndgrad::record(|| -> Result<_> {
        let tracked = params.tracked(ParamGroup::Adapter)?;
        let guide = GuidedBatch::replay(&tracked, conds, reweights, batch.context)?;
        let mut total: Option<Tensor> = None;
        let (mut terms, mut clipped, mut max_dev) = (0usize, 0.0, 0.0f64);
        for j in 0..n_steps {
            let rec = batch.trajectories[0].steps[j];
            if rec.t_prev == 0 {
                continue;
            }
            let step = sched.jump(rec.t, rec.t_prev)?;
            let x_t = rows(batch, j, |s| s.x_t)?;
            let x_prev = rows(batch, j, |s| s.x_prev)?;
            let old: Vec<f64> = batch.trajectories.iter().map(|t| t.steps[j].log_prob).collect();
            let time = tracked.time_batch(sched, &vec![step.t; batch.len()])?;
            let (eps, scale) = guide.eps(&tracked, &x_t, &time, &step)?;
            if batch.trajectories.iter().any(|t| t.steps[j].scale != scale) {
                return Err(Error::Config(format!("guidance scale at t={} differs from collection", step.t)));
            }
            let mean = transition_mean(&x_t, &step, &eps)?;
            let logp = gaussian_log_density(&x_prev, &mean, step.sigma2)?;
            let s = clipped_surrogate(&logp, &old, adv, clip)?;
            clipped += s.clip_fraction;
            max_dev = max_dev.max(s.max_ratio_deviation);
            terms += 1;
            total = Some(match total {
                None => s.loss,
                Some(acc) => acc.add(&s.loss)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("no stochastic steps to update".into()))?;
        Ok((tracked, total.scale(1.0 / terms as f64), clipped / terms as f64, max_dev))
    })?;
    let (tracked, loss, clip_fraction, max_ratio_deviation) = out?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("policy-gradient loss"));
    }
    let grads = adapter_grads(&tracked, &tape.backward(&loss)?);
    Ok(AdapterGradient {
        loss: value,
        grads,
        mean_reward: batch.mean_reward().unwrap_or(f64::NAN),
        clip_fraction,
        max_ratio_deviation,
    })
}

/// Samples a fresh batch with the adapters on the tape and ascends the mean
/// reward through the chain (only the last `trunc_k` steps when truncated).
pub fn backprop_update(
    params: &mut DenoiserParams,
    opt: &mut AdamW,
    req: &CollectRequest<'_>,
    spec: &RewardSpec,
    counter: &RewardQueryCounter,
    cfg: &FineTuneConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let g = reward_gradient(params, req, spec, counter, cfg.trunc_k, rng)?;
    let grad_norm = apply(params, opt, &g.grads)?;
    Ok(UpdateStats {
        loss: g.loss,
        mean_reward: g.mean_reward,
        clip_fraction: 0.0,
        max_ratio_deviation: 0.0,
        grad_norm,
    })
}

/// Gradient of `-mean reward` of a freshly sampled batch with respect to the
/// adapters. Conditions and emphasis are drawn from `rng`; noise comes from
/// the streams in `req`, so equal inputs give an equal chain.
pub fn reward_gradient(
    params: &DenoiserParams,
    req: &CollectRequest<'_>,
    spec: &RewardSpec,
    counter: &RewardQueryCounter,
    trunc_k: Option<usize>,
    rng: &mut impl Rng,
) -> Result<AdapterGradient> {
    if !spec.kind.is_differentiable() {
        return Err(rewards::Error::NonDifferentiable(spec.kind).into());
    }
    require_adapters(params)?;
    if req.conditions.is_empty() {
        return Err(Error::Config("no training conditions".into()));
    }
    let conds: Vec<Condition> = (0..req.batch)
        .map(|_| req.conditions[rng.gen_range(0..req.conditions.len())].clone())
        .collect();
    // Emphasis rows come from the embedding, which is never trained here.
    let guide = GuidedBatch::new(params, conds.clone(), req.context, rng)?;
    let streams: Vec<u64> = (0..req.batch as u64).map(|i| req.first_stream + i).collect();
    let options = SampleOptions { tracked_tail: trunc_k };
    let (out, tape) = ndgrad::record(|| -> Result<_> {
        let tracked = params.tracked(ParamGroup::Adapter)?;
        let sample = ancestral_sample(&tracked, req.sched, req.n_steps, &guide, req.seed, &streams, options)?;
        let r = counter.query_tensor(spec, &sample.x0, &conds)?;
        let mean_reward = r.data().iter().sum::<f64>() / r.numel() as f64;
        Ok((tracked, r.mean().neg(), mean_reward))
    })?;
    let (tracked, loss, mean_reward) = out?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("reward loss"));
    }
    let grads = adapter_grads(&tracked, &tape.backward(&loss)?);
    Ok(AdapterGradient {
        loss: value,
        grads,
        mean_reward,
        clip_fraction: 0.0,
        max_ratio_deviation: 0.0,
    })
}

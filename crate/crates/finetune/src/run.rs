use std::time::Instant;

use diffusion::{AdamW, Condition, DenoiserParams, NoiseSchedule};
use guidance::GuidanceContext;
use rand::Rng;
use rewards::{evaluate, holdout_reward, EvalProtocol, RewardQueryCounter, RewardSpec};

use crate::config::{FineTuneConfig, Method};
use crate::error::{Error, Result};
use crate::rollout::{collect_batch, CollectRequest};
use crate::update::{backprop_update, ddpo_update};

/// Metrics at one evaluation tick. Rewards are raw values of the reward
/// function; `NaN` marks a column with nothing to report yet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunLogRow {
    pub iteration: usize,
    pub reward_queries: u64,
    /// Mean collected reward over the iterations since the previous tick.
    pub mean_train_reward: f64,
    pub eval_seen_reward: f64,
    pub eval_unseen_reward: f64,
    /// Second reward scored on the seen-condition evaluation samples.
    pub cross_reward: f64,
    pub diversity: f64,
    pub clip_fraction: f64,
    /// Elapsed time since the run started; 0 unless wall-clock logging is on.
    pub wall_ms: u64,
}

/// Everything a run needs besides the parameters and the fine-tuning config.
#[derive(Debug, Clone, Copy)]
pub struct RunSetup<'a> {
    pub sched: &'a NoiseSchedule,
    pub train: &'a [Condition],
    pub unseen: &'a [Condition],
    pub reward: &'a RewardSpec,
    pub cross_reward: Option<&'a RewardSpec>,
    /// Guidance template; its exploration flag is set per iteration.
    pub guidance: GuidanceContext,
    /// Evaluation sampling; `per_condition` is taken from the config.
    pub eval: EvalProtocol,
    pub seed: u64,
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    pub log: Vec<RunLogRow>,
    /// Mean collected reward per iteration.
    pub train_rewards: Vec<f64>,
    pub reward_queries: u64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Alternates collection and adapter updates for `cfg.iterations`
/// iterations, evaluating every `cfg.eval_every` iterations and after the
/// last one. Evaluation never explores and never counts as reward queries.
/// `on_tick` sees each row with the parameters it was measured on.
pub fn finetune(
    params: &mut DenoiserParams,
    cfg: &FineTuneConfig,
    setup: &RunSetup<'_>,
    rng: &mut impl Rng,
    on_tick: &mut dyn FnMut(&RunLogRow, &DenoiserParams) -> Result<()>,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    setup.guidance.prompt.validate()?;
    setup.guidance.schedule.check_horizon(setup.sched.len())?;
    if cfg.method == Method::Backprop && !setup.reward.kind.is_differentiable() {
        return Err(rewards::Error::NonDifferentiable(setup.reward.kind).into());
    }
    match params.adapter_rank() {
        None => params.attach_adapters(cfg.adapter_rank, rng)?,
        Some(r) if r != cfg.adapter_rank => {
            return Err(Error::Config(format!("adapters have rank {r}, config asks for {}", cfg.adapter_rank)))
        }
        Some(_) => {}
    }
    let protocol = EvalProtocol {
        per_condition: cfg.eval_n,
        ..setup.eval
    };
    let start = Instant::now();
    let counter = RewardQueryCounter::new();
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = Vec::new();
    let mut train_rewards = Vec::with_capacity(cfg.iterations);
    let (mut pending_rewards, mut pending_clip) = (Vec::new(), Vec::new());
    for it in 0..=cfg.iterations {
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let seen = evaluate(params, setup.sched, setup.train, setup.guidance.schedule, &protocol, setup.reward)?;
            let unseen = if setup.unseen.is_empty() {
                f64::NAN
            } else {
                holdout_reward(params, setup.sched, setup.train, setup.unseen, setup.guidance.schedule, &protocol, setup.reward)?
            };
            let cross = match setup.cross_reward {
                Some(spec) => {
                    let conds: Vec<Condition> = setup
                        .train
                        .iter()
                        .flat_map(|c| std::iter::repeat(c.clone()).take(protocol.per_condition))
                        .collect();
                    mean(&spec.score_batch(&seen.points, &conds)?)
                }
                None => f64::NAN,
            };
            let row = RunLogRow {
                iteration: it,
                reward_queries: counter.count(),
                mean_train_reward: mean(&pending_rewards),
                eval_seen_reward: seen.mean_reward,
                eval_unseen_reward: unseen,
                cross_reward: cross,
                diversity: seen.diversity,
                clip_fraction: if cfg.method == Method::Ddpo { mean(&pending_clip) } else { 0.0 },
                wall_ms: if setup.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
            };
            on_tick(&row, params)?;
            log.push(row);
            pending_rewards.clear();
            pending_clip.clear();
        }
        if it == cfg.iterations {
            break;
        }
        let req = CollectRequest {
            sched: setup.sched,
            conditions: setup.train,
            context: GuidanceContext {
                exploration_active: cfg.exploration_active(it),
                ..setup.guidance
            },
            batch: cfg.batch,
            n_steps: cfg.steps,
            seed: setup.seed,
            first_stream: (it * cfg.batch) as u64,
        };
        let stats = match cfg.method {
            Method::Ddpo => {
                let batch = collect_batch(params, &req, setup.reward, &counter, rng)?;
                ddpo_update(params, &mut opt, &batch, setup.sched, cfg)?
            }
            Method::Backprop => backprop_update(params, &mut opt, &req, setup.reward, &counter, cfg, rng)?,
        };
        train_rewards.push(stats.mean_reward);
        pending_rewards.push(stats.mean_reward);
        pending_clip.push(stats.clip_fraction);
    }
    Ok(FineTuneOutcome {
        log,
        train_rewards,
        reward_queries: counter.count(),
    })
}

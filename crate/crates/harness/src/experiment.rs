//! Experiment recipes built from an [`ExperimentConfig`].

use std::fmt;

use diffusion::{
    ancestral_sample, Checkpoint, Condition, ConditionVocabulary, DenoiserParams, ModelConfig, NoiseSchedule, PretrainConfig,
    PretrainReport, SampleOptions, ToyDatasetSpec,
};
use finetune::{FineTuneConfig, FineTuneOutcome, Method, RunLogRow, RunSetup};
use guidance::{GuidanceContext, GuidanceSchedule, GuidedBatch, PromptWeighting};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rewards::{batch_diversity, evaluate, EvalProtocol, RewardKind, RewardSpec};

use crate::config::{ConfigError, ExperimentConfig, Truncation};
use crate::error::{Error, Result};
use crate::stats::{iqr, median};

/// Which exploration modules a fine-tuning run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Arm {
    pub scheduling: bool,
    pub reweighting: bool,
    /// Overrides `guidance.t_thres` when set.
    pub t_thres: Option<usize>,
}

impl Arm {
    pub const BASELINE: Arm = Arm {
        scheduling: false,
        reweighting: false,
        t_thres: None,
    };
    pub const DIFFEXP: Arm = Arm {
        scheduling: true,
        reweighting: true,
        t_thres: None,
    };
    pub const SCHEDULING: Arm = Arm {
        scheduling: true,
        reweighting: false,
        t_thres: None,
    };
    pub const REWEIGHTING: Arm = Arm {
        scheduling: false,
        reweighting: true,
        t_thres: None,
    };

    /// Modules as enabled in the config.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Arm {
            scheduling: cfg.guidance.scheduling,
            reweighting: cfg.prompt_weighting.enabled,
            t_thres: None,
        }
    }

    pub fn with_t_thres(self, t: usize) -> Self {
        Arm { t_thres: Some(t), ..self }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match (self.scheduling, self.reweighting) {
            (false, false) => "baseline",
            (true, false) => "scheduling",
            (false, true) => "reweighting",
            (true, true) => "diffexp",
        };
        f.write_str(name)?;
        if let Some(t) = self.t_thres {
            write!(f, "_t{t}")?;
        }
        Ok(())
    }
}

fn invalid(key: &'static str, reason: impl fmt::Display) -> Error {
    Error::Config(ConfigError::Invalid {
        key,
        reason: reason.to_string(),
    })
}

/// Length scale that puts the anchors of adjacent concepts exactly `4 rho` apart.
pub fn default_rho(vocab: &ConditionVocabulary) -> f64 {
    2.0 * vocab.radius() * (std::f64::consts::PI / vocab.concepts() as f64).sin() / 4.0
}

/// Seen/unseen/cross metrics of one parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub seen_reward: f64,
    pub unseen_reward: f64,
    pub cross_reward: f64,
    pub diversity: f64,
    /// Largest achievable training reward over the training conditions.
    pub max_reward: f64,
}

/// Validated, ready-to-run view of a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub sched: NoiseSchedule,
    pub data: ToyDatasetSpec,
    pub heldout_per_concept: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub reward: RewardSpec,
    pub cross_reward: RewardSpec,
    pub guidance: GuidanceContext,
    pub finetune: FineTuneConfig,
    pub eval: EvalProtocol,
}

impl Experiment {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let c = config;
        let sched = NoiseSchedule::linear(c.schedule.timesteps, c.schedule.beta_start, c.schedule.beta_end)
            .map_err(|e| invalid("schedule", e))?;
        let vocab = ConditionVocabulary::new(c.data.concepts, c.data.radius).map_err(|e| invalid("data.concepts", e))?;
        let data = ToyDatasetSpec {
            vocab: vocab.clone(),
            spread: c.data.spread,
            samples_per_concept: c.data.samples_per_concept,
            pair_probability: c.data.pair_probability,
            train_pairs: c.data.train_pairs.0.clone(),
            unseen_pairs: c.data.unseen_pairs.0.clone(),
        };
        data.validate().map_err(|e| invalid("data", e))?;
        if data.train_pairs.is_empty() {
            return Err(invalid("data.train_pairs", "at least one training condition is required"));
        }
        if !(c.data.spread > 0.0) {
            return Err(invalid("data.spread", "must be positive"));
        }
        let model = ModelConfig {
            table_rows: vocab.table_rows(),
            embed_dim: c.model.embed_dim,
            hidden: c.model.hidden,
            second_token_weight: c.model.second_token_weight,
            input_scale: data.data_scale(),
        };
        if model.embed_dim == 0 || model.hidden == 0 {
            return Err(invalid("model", "embed_dim and hidden must be positive"));
        }
        let pretrain = PretrainConfig {
            steps: c.pretrain.steps,
            batch: c.pretrain.batch,
            lr: c.pretrain.lr,
            decay_at: c.pretrain.decay_at,
            decay_factor: c.pretrain.decay_factor,
            cond_dropout: c.pretrain.cond_dropout,
        };
        if pretrain.batch == 0 || !(0.0..=1.0).contains(&pretrain.cond_dropout) {
            return Err(invalid("pretrain", "batch must be positive and cond_dropout in [0, 1]"));
        }
        let rho = c.reward.rho.or(default_rho(&vocab));
        let reward = RewardSpec::new(c.reward.kind, rho, vocab.clone()).map_err(|e| invalid("reward.rho", e))?;
        let cross_rho = c.reward.cross_rho.or(2.0 * rho);
        let cross_reward = RewardSpec::new(c.reward.cross_kind, cross_rho, vocab).map_err(|e| invalid("reward.cross_rho", e))?;
        let schedule = GuidanceSchedule::new(c.guidance.w_l, c.guidance.w_h, c.guidance.t_thres, c.guidance.eval_scale)
            .map_err(|e| invalid("guidance", e))?;
        schedule.check_horizon(sched.len()).map_err(|e| invalid("guidance.t_thres", e))?;
        let prompt = PromptWeighting {
            enabled: c.prompt_weighting.enabled,
            lo: c.prompt_weighting.lo,
            hi: c.prompt_weighting.hi,
            words: c.prompt_weighting.words,
        };
        prompt.validate().map_err(|e| invalid("prompt_weighting", e))?;
        let guidance = GuidanceContext {
            schedule,
            prompt,
            scheduling: c.guidance.scheduling,
            exploration_active: false,
        };
        let f = &c.finetune;
        let defaults = FineTuneConfig::for_method(f.method);
        let finetune = FineTuneConfig {
            method: f.method,
            iterations: f.iterations,
            batch: f.batch,
            steps: f.steps,
            clip: f.clip,
            lr: f.lr.or(defaults.lr),
            beta1: f.beta1,
            beta2: f.beta2,
            weight_decay: f.weight_decay,
            explore_fraction: f.explore_fraction,
            normalize_advantages: f.normalize_advantages,
            epochs: f.epochs,
            adapter_rank: f.adapter_rank,
            trunc_k: match f.trunc_k {
                Truncation::Full => None,
                Truncation::Last(k) => Some(k),
            },
            eval_every: f.eval_every,
            eval_n: f.eval_n,
        };
        finetune.validate().map_err(|e| invalid("finetune", e))?;
        if f.method == Method::Backprop && !reward.kind.is_differentiable() {
            return Err(invalid("reward.kind", format!("{} reward cannot drive backprop fine-tuning", reward.kind)));
        }
        if c.eval.n_steps == 0 || c.eval.tradeoff_samples < 2 || c.eval.tradeoff_seeds == 0 {
            return Err(invalid("eval", "n_steps and tradeoff_seeds must be positive, tradeoff_samples at least 2"));
        }
        if c.seeds.list.0.is_empty() {
            return Err(invalid("seeds.list", "at least one seed is required"));
        }
        Ok(Self {
            config: c.clone(),
            sched,
            data,
            heldout_per_concept: c.data.heldout_per_concept,
            model,
            pretrain,
            reward,
            cross_reward,
            guidance,
            finetune,
            eval: EvalProtocol {
                per_condition: f.eval_n,
                n_steps: c.eval.n_steps,
                seed: c.eval.seed,
            },
        })
    }

    pub fn train_conditions(&self) -> &[Condition] {
        &self.data.train_pairs
    }

    pub fn unseen_conditions(&self) -> &[Condition] {
        &self.data.unseen_pairs
    }

    pub fn seeds(&self) -> &[u64] {
        &self.config.seeds.list.0
    }

    /// Generates data and pretrains a fresh model from `seed`.
    pub fn pretrain(&self, seed: u64) -> Result<(Checkpoint, PretrainReport)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self.data.generate(&mut rng)?;
        let heldout = ToyDatasetSpec {
            samples_per_concept: self.heldout_per_concept,
            pair_probability: 0.0,
            ..self.data.clone()
        }
        .generate(&mut rng)?;
        let mut params = DenoiserParams::init(self.model.clone(), &mut rng)?;
        let report = diffusion::pretrain(&mut params, &data, &heldout, &self.sched, &self.pretrain, &mut rng)?;
        Ok((
            Checkpoint {
                timesteps: self.sched.len(),
                params,
            },
            report,
        ))
    }

    /// Rejects checkpoints trained for another schedule length or width.
    pub fn check_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.timesteps != self.sched.len() {
            return Err(Error::Horizon {
                expected: self.sched.len(),
                found: ckpt.timesteps,
            });
        }
        let got = &ckpt.params.config;
        if got.table_rows != self.model.table_rows || got.embed_dim != self.model.embed_dim || got.hidden != self.model.hidden {
            return Err(Error::Experiment(format!(
                "checkpoint model ({} rows, embed {}, hidden {}) does not match the config ({} rows, embed {}, hidden {})",
                got.table_rows, got.embed_dim, got.hidden, self.model.table_rows, self.model.embed_dim, self.model.hidden
            )));
        }
        Ok(())
    }

    /// Guidance template for `arm`; exploration is switched on per iteration.
    pub fn guidance_for(&self, arm: Arm) -> GuidanceContext {
        let mut g = self.guidance;
        g.scheduling = arm.scheduling;
        g.prompt.enabled = arm.reweighting;
        if let Some(t) = arm.t_thres {
            g.schedule.switch_t = t;
        }
        g
    }

    /// Fine-tunes a copy of `base` with `arm`. `seed` fixes the adapter
    /// initialisation, condition draws and every noise stream, so arms that
    /// share a seed are paired.
    pub fn finetune(
        &self,
        base: &DenoiserParams,
        arm: Arm,
        seed: u64,
        on_tick: &mut dyn FnMut(&RunLogRow, &DenoiserParams) -> finetune::Result<()>,
    ) -> Result<(DenoiserParams, FineTuneOutcome)> {
        if let Some(t) = arm.t_thres {
            GuidanceSchedule { switch_t: t, ..self.guidance.schedule }
                .check_horizon(self.sched.len())
                .map_err(|e| invalid("guidance.t_thres", e))?;
        }
        let mut params = base.clone();
        let setup = RunSetup {
            sched: &self.sched,
            train: self.train_conditions(),
            unseen: self.unseen_conditions(),
            reward: &self.reward,
            cross_reward: Some(&self.cross_reward),
            guidance: self.guidance_for(arm),
            eval: self.eval,
            seed,
            wall_clock: self.config.output.wall_clock,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let outcome = finetune::finetune(&mut params, &self.finetune, &setup, &mut rng, on_tick)?;
        Ok((params, outcome))
    }

    /// Seen, unseen and cross metrics with exploration off.
    pub fn evaluate(&self, params: &DenoiserParams) -> Result<EvalSummary> {
        let train = self.train_conditions();
        let seen = evaluate(params, &self.sched, train, self.guidance.schedule, &self.eval, &self.reward)?;
        let unseen = if self.unseen_conditions().is_empty() {
            f64::NAN
        } else {
            rewards::holdout_reward(
                params,
                &self.sched,
                train,
                self.unseen_conditions(),
                self.guidance.schedule,
                &self.eval,
                &self.reward,
            )?
        };
        let conds: Vec<Condition> = train
            .iter()
            .flat_map(|c| std::iter::repeat(c.clone()).take(self.eval.per_condition))
            .collect();
        let cross = self.cross_reward.score_batch(&seen.points, &conds)?;
        Ok(EvalSummary {
            seen_reward: seen.mean_reward,
            unseen_reward: unseen,
            cross_reward: cross.iter().sum::<f64>() / cross.len() as f64,
            diversity: seen.diversity,
            max_reward: self.max_reward()?,
        })
    }

    /// Mean over training conditions of the largest achievable reward.
    pub fn max_reward(&self) -> Result<f64> {
        let train = self.train_conditions();
        let mut total = 0.0;
        for c in train {
            total += self.reward.max_value(c)?;
        }
        Ok(total / train.len() as f64)
    }

    /// Samples one condition under constant-low, dynamic and constant-high
    /// guidance for every trade-off seed. Quality is the mean proximity
    /// reward of the samples (length scale of the cross reward).
    pub fn reproduce_tradeoff(&self, params: &DenoiserParams) -> Result<TradeoffTable> {
        let cfg = &self.config.eval;
        let condition = self.train_conditions()[0].clone();
        let quality = RewardSpec::new(RewardKind::Proximity, self.cross_reward.rho, self.reward.vocab.clone())?;
        let s = self.guidance.schedule;
        let schedules = [
            (GuidanceLevel::ConstantLow, 0),
            (GuidanceLevel::Dynamic, s.switch_t),
            (GuidanceLevel::ConstantHigh, self.sched.len()),
        ];
        let mut rows = Vec::new();
        for seed in 0..cfg.tradeoff_seeds as u64 {
            for &(level, switch_t) in &schedules {
                let ctx = GuidanceContext {
                    schedule: GuidanceSchedule { switch_t, ..s },
                    prompt: PromptWeighting {
                        enabled: false,
                        ..self.guidance.prompt
                    },
                    scheduling: true,
                    exploration_active: true,
                };
                let conds = vec![condition.clone(); cfg.tradeoff_samples];
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let guide = GuidedBatch::new(params, conds.clone(), ctx, &mut unused)?;
                let streams: Vec<u64> = (0..cfg.tradeoff_samples as u64).collect();
                let sample = ancestral_sample(params, &self.sched, cfg.n_steps, &guide, seed, &streams, SampleOptions::default())?;
                let points: Vec<[f64; 2]> = sample.trajectories.iter().map(|t| t.x0).collect();
                let q = quality.score_batch(&points, &conds)?;
                rows.push(TradeoffRow {
                    seed,
                    level,
                    diversity: batch_diversity(&points)?,
                    quality: q.iter().sum::<f64>() / q.len() as f64,
                });
            }
        }
        Ok(TradeoffTable {
            condition,
            rows,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceLevel {
    ConstantLow,
    Dynamic,
    ConstantHigh,
}

impl fmt::Display for GuidanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceLevel::ConstantLow => "constant_low",
            GuidanceLevel::Dynamic => "dynamic",
            GuidanceLevel::ConstantHigh => "constant_high",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffRow {
    pub seed: u64,
    pub level: GuidanceLevel,
    pub diversity: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffTable {
    pub condition: Condition,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffTable {
    /// Per-seed `(diversity, quality)` for one level, in seed order.
    pub fn level(&self, level: GuidanceLevel) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.level == level).map(|r| (r.diversity, r.quality)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,schedule,diversity,quality\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.seed, r.level, r.diversity, r.quality));
        }
        s
    }
}

/// First query count at which the seen reward reaches `level`.
pub fn queries_to_reach(log: &[RunLogRow], level: f64) -> Option<u64> {
    log.iter().find(|r| r.eval_seen_reward >= level).map(|r| r.reward_queries)
}

/// Final seen reward of a run log.
pub fn final_reward(log: &[RunLogRow]) -> f64 {
    log.last().map_or(f64::NAN, |r| r.eval_seen_reward)
}

/// Threshold crossings of one arm, as fractions of the maximum reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossings {
    pub half: Option<u64>,
    pub ninety: Option<u64>,
}

impl Crossings {
    pub fn of(log: &[RunLogRow], max_reward: f64) -> Self {
        Self {
            half: queries_to_reach(log, 0.5 * max_reward),
            ninety: queries_to_reach(log, 0.9 * max_reward),
        }
    }
}

fn show(q: Option<u64>) -> String {
    q.map_or_else(|| "never".to_string(), |q| q.to_string())
}

/// Paired run logs of two arms that shared a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRun {
    pub seed: u64,
    pub baseline: Vec<RunLogRow>,
    pub treatment: Vec<RunLogRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSummary {
    pub median: f64,
    pub iqr: f64,
}

impl DeltaSummary {
    fn of(deltas: &[f64]) -> Self {
        Self {
            median: median(deltas),
            iqr: iqr(deltas),
        }
    }
}

/// Summary of paired baseline/treatment runs. A pure function of the logs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub seeds: Vec<u64>,
    pub seen: DeltaSummary,
    pub unseen: DeltaSummary,
    pub cross: DeltaSummary,
    pub diversity: DeltaSummary,
    /// Per seed: treatment queries to reach the baseline's final seen reward
    /// divided by the baseline's budget; `None` if never reached.
    pub query_ratios: Vec<Option<f64>>,
    /// Median ratio with unreached seeds counted as infinite.
    pub median_query_ratio: f64,
    pub crossings: Vec<(Crossings, Crossings)>,
}

fn deltas(runs: &[PairedRun], pick: impl Fn(&RunLogRow) -> f64) -> Vec<f64> {
    runs.iter()
        .map(|r| match (r.baseline.last(), r.treatment.last()) {
            (Some(b), Some(t)) => pick(t) - pick(b),
            _ => f64::NAN,
        })
        .collect()
}

/// Treatment queries needed to reach the baseline's final seen reward, over
/// the baseline's budget.
pub fn query_ratio(baseline: &[RunLogRow], treatment: &[RunLogRow]) -> Option<f64> {
    let last = baseline.last()?;
    let q = queries_to_reach(treatment, last.eval_seen_reward)?;
    Some(q as f64 / last.reward_queries as f64)
}

pub fn summarize_pairs(runs: &[PairedRun], max_reward: f64) -> CompareSummary {
    let query_ratios: Vec<Option<f64>> = runs.iter().map(|r| query_ratio(&r.baseline, &r.treatment)).collect();
    let ratios: Vec<f64> = query_ratios.iter().map(|r| r.unwrap_or(f64::INFINITY)).collect();
    CompareSummary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        seen: DeltaSummary::of(&deltas(runs, |r| r.eval_seen_reward)),
        unseen: DeltaSummary::of(&deltas(runs, |r| r.eval_unseen_reward)),
        cross: DeltaSummary::of(&deltas(runs, |r| r.cross_reward)),
        diversity: DeltaSummary::of(&deltas(runs, |r| r.diversity)),
        median_query_ratio: median(&ratios),
        query_ratios,
        crossings: runs
            .iter()
            .map(|r| (Crossings::of(&r.baseline, max_reward), Crossings::of(&r.treatment, max_reward)))
            .collect(),
    }
}

impl CompareSummary {
    pub fn report(&self, baseline: Arm, treatment: Arm) -> String {
        let mut s = format!("paired comparison: {baseline} (baseline) vs {treatment} (treatment)\nseeds: {:?}\n\n", self.seeds);
        s.push_str("final-metric deltas (treatment - baseline)\n");
        for (name, d) in [
            ("eval_seen_reward", self.seen),
            ("eval_unseen_reward", self.unseen),
            ("cross_reward", self.cross),
            ("diversity", self.diversity),
        ] {
            s.push_str(&format!("  {name:<20} median {:+.6e}  iqr {:.6e}\n", d.median, d.iqr));
        }
        s.push_str("\nqueries for the treatment to reach the baseline's final seen reward, over the baseline budget\n");
        for (seed, r) in self.seeds.iter().zip(&self.query_ratios) {
            s.push_str(&format!(
                "  seed {seed}: {}\n",
                r.map_or_else(|| "never".to_string(), |r| format!("{r:.3}"))
            ));
        }
        s.push_str(&format!("  median ratio: {:.3}\n", self.median_query_ratio));
        s.push_str("\nqueries to reach 0.5 / 0.9 of the maximum reward\n");
        for (seed, (b, t)) in self.seeds.iter().zip(&self.crossings) {
            s.push_str(&format!(
                "  seed {seed}: {baseline} {} / {}; {treatment} {} / {}\n",
                show(b.half),
                show(b.ninety),
                show(t.half),
                show(t.ninety)
            ));
        }
        s
    }
}

/// Final seen rewards of one ablation arm over the seed list.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub arm: Arm,
    pub finals: Vec<f64>,
}

impl AblationArm {
    pub fn median(&self) -> f64 {
        median(&self.finals)
    }
}

/// Arms run by the default ablation: each single module at the configured
/// threshold, then the full method at each listed threshold.
pub fn ablation_arms(thresholds: &[usize]) -> Vec<Arm> {
    let mut arms = vec![Arm::BASELINE, Arm::SCHEDULING, Arm::REWEIGHTING];
    arms.extend(thresholds.iter().map(|&t| Arm::DIFFEXP.with_t_thres(t)));
    arms
}

pub const ABLATION_THRESHOLDS: [usize; 3] = [900, 800, 700];

pub fn ablation_report(arms: &[AblationArm], seeds: &[u64], max_reward: f64) -> String {
    let mut s = format!("ablation over seeds {seeds:?}; final eval_seen_reward (fraction of max {max_reward:.6e})\n");
    for a in arms {
        let finals: Vec<String> = a.finals.iter().map(|f| format!("{:.4}", f / max_reward)).collect();
        s.push_str(&format!(
            "  {:<16} median {:.4}  per seed [{}]\n",
            a.arm.to_string(),
            a.median() / max_reward,
            finals.join(", ")
        ));
    }
    s
}

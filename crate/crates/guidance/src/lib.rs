//! Classifier-free guidance and the exploration policies layered on it.
//!
//! While exploring, the guidance scale is low for early (large `t`) steps
//! and high afterwards, and one condition row per trajectory is pushed away
//! from the null embedding by a random factor. With exploration off, both
//! reduce to constant-scale guidance on the unmodified condition.

use diffusion::{Condition, DenoiserParams, Guide, Reweight, Slots, StepConstants, TimeBatch};
use ndgrad::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid guidance schedule: {0}")]
    Schedule(String),
    #[error("invalid prompt weighting: {0}")]
    PromptWeighting(String),
    #[error("condition has no rows")]
    EmptyCondition,
    #[error(transparent)]
    Diffusion(#[from] diffusion::Error),
    #[error(transparent)]
    Tensor(#[from] ndgrad::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// `uncond + w * (cond - uncond)`; `w = 1` returns `cond` itself so the
/// identity case carries no rounding.
pub fn cfg_predict(cond: &Tensor, uncond: &Tensor, w: f64) -> ndgrad::Result<Tensor> {
    if w == 1.0 {
        if cond.shape() != uncond.shape() {
            return Err(ndgrad::Error::ShapeMismatch {
                op: "cfg_predict",
                lhs: cond.shape().to_vec(),
                rhs: uncond.shape().to_vec(),
            });
        }
        return Ok(cond.clone());
    }
    uncond.add(&cond.sub(uncond)?.scale(w))
}

/// Two-level guidance scale: `low` while `t > switch_t`, `high` from `switch_t` down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSchedule {
    pub low: f64,
    pub high: f64,
    pub switch_t: usize,
    /// Constant scale used whenever exploration is off.
    pub eval_scale: f64,
}

impl GuidanceSchedule {
    pub fn new(low: f64, high: f64, switch_t: usize, eval_scale: f64) -> Result<Self> {
        let s = Self {
            low,
            high,
            switch_t,
            eval_scale,
        };
        if !(low.is_finite() && high.is_finite() && eval_scale.is_finite()) || low >= high {
            return Err(Error::Schedule(format!("need finite low < high, got low={low} high={high}")));
        }
        Ok(s)
    }

    /// Rejects a switch point beyond the schedule length.
    pub fn check_horizon(&self, timesteps: usize) -> Result<()> {
        if self.switch_t > timesteps {
            return Err(Error::Schedule(format!("switch_t {} exceeds T={timesteps}", self.switch_t)));
        }
        Ok(())
    }

    /// Piecewise scale; `t == switch_t` takes the high value.
    pub fn scale_at(&self, t: usize) -> f64 {
        if t > self.switch_t {
            self.low
        } else {
            self.high
        }
    }
}

/// Random emphasis of condition rows: `row <- null + w * (row - null)` with
/// `w ~ U(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptWeighting {
    pub enabled: bool,
    pub lo: f64,
    pub hi: f64,
    /// Rows emphasised per trajectory, capped at the condition length.
    pub words: usize,
}

impl Default for PromptWeighting {
    fn default() -> Self {
        Self {
            enabled: true,
            lo: 1.0,
            hi: 1.2,
            words: 1,
        }
    }
}

impl PromptWeighting {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 1.0 && self.hi >= self.lo && self.hi.is_finite()) {
            return Err(Error::PromptWeighting(format!(
                "need 1 <= lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.words == 0 {
            return Err(Error::PromptWeighting("words must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything that decides the guidance applied to one collection round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceContext {
    pub schedule: GuidanceSchedule,
    pub prompt: PromptWeighting,
    /// Whether the two-level schedule is used while exploring.
    pub scheduling: bool,
    pub exploration_active: bool,
}

impl GuidanceContext {
    /// Constant `eval_scale` guidance, no emphasis.
    pub fn evaluation(schedule: GuidanceSchedule) -> Self {
        Self {
            schedule,
            prompt: PromptWeighting {
                enabled: false,
                ..PromptWeighting::default()
            },
            scheduling: false,
            exploration_active: false,
        }
    }

    pub fn reweighting_active(&self) -> bool {
        self.exploration_active && self.prompt.enabled
    }
}

/// Guidance scale applied at timestep `t`.
pub fn guidance_scale_at(ctx: &GuidanceContext, t: usize) -> f64 {
    if ctx.exploration_active && ctx.scheduling {
        ctx.schedule.scale_at(t)
    } else {
        ctx.schedule.eval_scale
    }
}

/// Applies recorded emphasis to a copy of `rows`.
pub fn apply_reweights(rows: &[Vec<f64>], null_row: &[f64], reweights: &[Reweight]) -> Result<Vec<Vec<f64>>> {
    let mut out = rows.to_vec();
    for r in reweights {
        let row = out.get_mut(r.index).ok_or(Error::EmptyCondition)?;
        if r.weight == 1.0 {
            continue;
        }
        for (v, n) in row.iter_mut().zip(null_row) {
            *v = n + r.weight * (*v - n);
        }
    }
    Ok(out)
}

/// Picks `cfg.words` distinct rows uniformly and draws a weight for each.
/// Returns the modified copy and the records needed to replay it.
pub fn reweight_condition(
    rows: &[Vec<f64>],
    null_row: &[f64],
    cfg: &PromptWeighting,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Reweight>)> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::EmptyCondition);
    }
    let mut indices: Vec<usize> = (0..rows.len()).collect();
    let words = cfg.words.min(rows.len());
    let mut chosen = Vec::with_capacity(words);
    for _ in 0..words {
        chosen.push(indices.swap_remove(rng.gen_range(0..indices.len())));
    }
    let reweights: Vec<Reweight> = chosen
        .into_iter()
        .map(|index| Reweight {
            index,
            weight: if cfg.hi > cfg.lo { rng.gen_range(cfg.lo..=cfg.hi) } else { cfg.lo },
        })
        .collect();
    Ok((apply_reweights(rows, null_row, &reweights)?, reweights))
}

/// Guided estimate at one step with an explicit scale.
pub fn guided_eps(params: &DenoiserParams, x: &Tensor, time: &TimeBatch, slots: &Slots, scale: f64) -> Result<Tensor> {
    let p = params.predict(x, time, slots)?;
    Ok(cfg_predict(&p.cond, &p.uncond, scale)?)
}

/// Sampler-side guide for a batch: conditions with their per-trajectory
/// emphasis fixed at construction and a scale chosen per step.
#[derive(Debug, Clone)]
pub struct GuidedBatch {
    ctx: GuidanceContext,
    conditions: Vec<Condition>,
    reweights: Vec<Vec<Reweight>>,
    slots: Slots,
}

impl GuidedBatch {
    /// Draws emphasis for every row from `rng` when reweighting is active.
    pub fn new(params: &DenoiserParams, conditions: Vec<Condition>, ctx: GuidanceContext, rng: &mut impl Rng) -> Result<Self> {
        let null = params.null_row();
        let mut reweights = Vec::with_capacity(conditions.len());
        let mut rows = Vec::with_capacity(conditions.len());
        for c in &conditions {
            let base = params.condition_rows(c)?;
            if ctx.reweighting_active() {
                let (r, w) = reweight_condition(&base, &null, &ctx.prompt, rng)?;
                rows.push(r);
                reweights.push(w);
            } else {
                rows.push(base);
                reweights.push(Vec::new());
            }
        }
        let slots = Slots::from_rows(&rows, &null)?;
        Ok(Self {
            ctx,
            conditions,
            reweights,
            slots,
        })
    }

    /// Rebuilds a batch from recorded emphasis (no randomness).
    pub fn replay(params: &DenoiserParams, conditions: Vec<Condition>, reweights: Vec<Vec<Reweight>>, ctx: GuidanceContext) -> Result<Self> {
        let null = params.null_row();
        let rows = conditions
            .iter()
            .zip(&reweights)
            .map(|(c, w)| apply_reweights(&params.condition_rows(c)?, &null, w))
            .collect::<Result<Vec<_>>>()?;
        let slots = Slots::from_rows(&rows, &null)?;
        Ok(Self {
            ctx,
            conditions,
            reweights,
            slots,
        })
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn context(&self) -> &GuidanceContext {
        &self.ctx
    }
}

impl Guide for GuidedBatch {
    fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    fn reweights(&self) -> Vec<Vec<Reweight>> {
        self.reweights.clone()
    }

    fn eps(&self, params: &DenoiserParams, x: &Tensor, time: &TimeBatch, step: &StepConstants) -> diffusion::Result<(Tensor, f64)> {
        let w = guidance_scale_at(&self.ctx, step.t);
        let p = params.predict(x, time, &self.slots)?;
        Ok((cfg_predict(&p.cond, &p.uncond, w)?, w))
    }
}

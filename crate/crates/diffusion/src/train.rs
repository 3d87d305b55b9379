use ndgrad::{record, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ParamGroup, DATA_DIM};
use crate::optim::AdamW;
use crate::schedule::NoiseSchedule;
use crate::vocab::Condition;

/// Mean over rows of `‖eps - pred‖²` for `[B, D]` tensors.
pub fn noise_prediction_loss(pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok(eps.sub(pred)?.square().sum_axis(1)?.mean())
}

/// Loss value plus gradients of the requested parameter group, in
/// [`DenoiserParams::group`] order.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Denoising loss on one batch with `t ~ U{1..T}` and `eps ~ N(0, I)` drawn
/// from `rng`. Gradients are computed for `group` when given.
pub fn dm_loss(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    points: &[[f64; 2]],
    conditions: &[Condition],
    group: Option<ParamGroup>,
    rng: &mut impl Rng,
) -> Result<LossAndGrads> {
    let rows = points.len();
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if conditions.len() != rows {
        return Err(Error::BatchSize {
            what: "conditions",
            expected: rows,
            got: conditions.len(),
        });
    }
    let ts: Vec<usize> = (0..rows).map(|_| rng.gen_range(1..=sched.len())).collect();
    let eps: Vec<f64> = (0..rows * DATA_DIM).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::new(eps, &[rows, DATA_DIM])?;
    let x0 = Tensor::new(points.iter().flatten().copied().collect(), &[rows, DATA_DIM])?;
    let forward = |p: &DenoiserParams| -> Result<Tensor> {
        let x_t = sched.q_sample(&x0, &ts, &eps)?;
        let time = p.time_batch(sched, &ts)?;
        let pred = p.predict(&x_t, &time, &p.token_slots(conditions)?)?.cond;
        noise_prediction_loss(&pred, &eps)
    };
    let Some(group) = group else {
        return Ok(LossAndGrads {
            loss: forward(params)?.item()?,
            grads: Vec::new(),
        });
    };
    let (out, tape) = record(|| -> Result<_> {
        let tracked = params.tracked(group)?;
        let loss = forward(&tracked)?;
        Ok((tracked, loss))
    })?;
    let (tracked, loss) = out?;
    let grads = tape.backward(&loss)?;
    Ok(LossAndGrads {
        loss: loss.item()?,
        grads: tracked.group(group).into_iter().map(|t| grads.wrt_or_zeros(t).to_vec()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Probability of replacing a training condition with the null condition.
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 256,
            lr: 2e-3,
            decay_at: 0.7,
            decay_factor: 0.25,
            cond_dropout: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Training loss per optimiser step.
    pub losses: Vec<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
}

/// Held-out denoising loss with a fixed noise stream, so before/after
/// numbers are comparable.
pub fn heldout_loss(params: &DenoiserParams, sched: &NoiseSchedule, data: &ToyDataset, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (points, conds) in data.points.chunks(512).zip(data.conditions.chunks(512)) {
        total += dm_loss(params, sched, points, conds, None, &mut rng)?.loss * points.len() as f64;
    }
    Ok(total / data.len() as f64)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Trains the base parameters on `data` and reports the loss curve and a
/// held-out loss before and after.
pub fn pretrain(
    params: &mut DenoiserParams,
    data: &ToyDataset,
    heldout: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<PretrainReport> {
    if data.is_empty() || heldout.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let heldout_seed = rng.gen();
    let heldout_before = heldout_loss(params, sched, heldout, heldout_seed)?;
    let mut opt = AdamW::new(cfg.lr, 0.9, 0.999, 0.0);
    let decay_step = (cfg.decay_at * cfg.steps as f64) as usize;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut above = 0;
    for step in 0..cfg.steps {
        if step == decay_step {
            opt.lr = cfg.lr * cfg.decay_factor;
        }
        let mut points = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..data.len());
            points.push(data.points[i]);
            conds.push(if rng.gen::<f64>() < cfg.cond_dropout {
                Condition::null()
            } else {
                data.conditions[i].clone()
            });
        }
        let out = dm_loss(params, sched, &points, &conds, Some(ParamGroup::Base), rng)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
        losses.push(out.loss);
        above = if out.loss > DIVERGENCE_FACTOR * losses[0] { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                step,
                loss: out.loss,
                initial: losses[0],
            });
        }
        let mut values = params.values(ParamGroup::Base);
        opt.step(&mut values, &out.grads);
        params.set_values(ParamGroup::Base, values)?;
    }
    let heldout_after = heldout_loss(params, sched, heldout, heldout_seed)?;
    Ok(PretrainReport {
        losses,
        heldout_before,
        heldout_after,
    })
}

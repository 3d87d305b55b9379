use ndgrad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{DenoiserParams, Slots, TimeBatch, DATA_DIM};
use crate::schedule::{gaussian_log_density, sample_transition, transition_mean, NoiseSchedule, StepConstants};
use crate::vocab::Condition;

/// Independent random stream for one trajectory.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Emphasis applied to one row of a condition for a whole trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reweight {
    pub index: usize,
    pub weight: f64,
}

/// One visited reverse transition of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub x_t: [f64; 2],
    pub scale: f64,
    pub mean: [f64; 2],
    pub x_prev: [f64; 2],
    pub sigma2: f64,
    /// 0 for the deterministic final step.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub condition: Condition,
    /// Rows emphasised for this trajectory; empty when none.
    pub reweights: Vec<Reweight>,
    pub seed: u64,
    pub stream: u64,
    pub steps: Vec<StepRecord>,
    pub x0: [f64; 2],
}

impl Trajectory {
    /// Log densities recomputed from the stored `(x_prev, mean, sigma2)`.
    pub fn recomputed_log_probs(&self) -> Result<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| {
                if s.t_prev == 0 {
                    return Ok(0.0);
                }
                let x = Tensor::new(s.x_prev.to_vec(), &[1, 2])?;
                let m = Tensor::new(s.mean.to_vec(), &[1, 2])?;
                Ok(gaussian_log_density(&x, &m, s.sigma2)?.data()[0])
            })
            .collect()
    }
}

/// Supplies the noise estimate used at each reverse step.
pub trait Guide {
    /// Conditions of the batch rows, in order.
    fn conditions(&self) -> &[Condition];

    /// Per-row emphasis records; empty when rows are unmodified.
    fn reweights(&self) -> Vec<Vec<Reweight>> {
        vec![Vec::new(); self.conditions().len()]
    }

    /// Noise estimate for every row and the guidance scale applied at `step`.
    fn eps(&self, params: &DenoiserParams, x: &Tensor, time: &TimeBatch, step: &StepConstants) -> Result<(Tensor, f64)>;
}

/// Plain conditional prediction (guidance scale 1).
#[derive(Debug, Clone)]
pub struct ConditionalGuide {
    conditions: Vec<Condition>,
    slots: Slots,
}

impl ConditionalGuide {
    pub fn new(params: &DenoiserParams, conditions: Vec<Condition>) -> Result<Self> {
        let rows = conditions
            .iter()
            .map(|c| params.condition_rows(c))
            .collect::<Result<Vec<_>>>()?;
        let slots = Slots::from_rows(&rows, &params.null_row())?;
        Ok(Self { conditions, slots })
    }
}

impl Guide for ConditionalGuide {
    fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    fn eps(&self, params: &DenoiserParams, x: &Tensor, time: &TimeBatch, _step: &StepConstants) -> Result<(Tensor, f64)> {
        Ok((params.predict(x, time, &self.slots)?.cond, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleOptions {
    /// Only the last `k` steps are recorded on an active tape; earlier steps
    /// run with recording paused. `None` keeps the whole chain.
    pub tracked_tail: Option<usize>,
}

/// Sampled batch: per-row trajectories plus the final points as a tensor,
/// tracked when sampling ran inside a recording scope.
#[derive(Debug, Clone)]
pub struct Sample {
    pub trajectories: Vec<Trajectory>,
    pub x0: Tensor,
}

fn normal_rows(rngs: &mut [ChaCha8Rng]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rngs.len() * DATA_DIM);
    for rng in rngs.iter_mut() {
        for _ in 0..DATA_DIM {
            data.push(StandardNormal.sample(rng));
        }
    }
    Ok(Tensor::new(data, &[rngs.len(), DATA_DIM])?)
}

fn row(t: &Tensor, i: usize) -> [f64; 2] {
    [t.data()[i * 2], t.data()[i * 2 + 1]]
}

/// Ancestral sampling from `x_T ~ N(0, I)` over `n_steps` strided steps.
///
/// Row `i` draws all its noise from `stream_rng(seed, streams[i])`, so a row
/// is reproducible on its own regardless of the rest of the batch.
pub fn ancestral_sample(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    n_steps: usize,
    guide: &dyn Guide,
    seed: u64,
    streams: &[u64],
    options: SampleOptions,
) -> Result<Sample> {
    let steps = sched.sampling_steps(n_steps)?;
    let rows = streams.len();
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if guide.conditions().len() != rows {
        return Err(Error::BatchSize {
            what: "guide conditions",
            expected: rows,
            got: guide.conditions().len(),
        });
    }
    let mut rngs: Vec<ChaCha8Rng> = streams.iter().map(|&s| stream_rng(seed, s)).collect();
    let mut x = normal_rows(&mut rngs)?;
    let mut records: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(steps.len()); rows];
    let tail = options.tracked_tail.unwrap_or(steps.len());
    for (k, step) in steps.iter().enumerate() {
        let noise = if step.is_final() {
            Tensor::zeros(&[rows, DATA_DIM])
        } else {
            normal_rows(&mut rngs)?
        };
        let run = || -> Result<(Tensor, Tensor, Vec<f64>, f64)> {
            let time = params.time_batch(sched, &vec![step.t; rows])?;
            let (eps, scale) = guide.eps(params, &x, &time, step)?;
            let mean = transition_mean(&x, step, &eps)?;
            let (next, log_prob) = sample_transition(&mean, step, &noise)?;
            Ok((mean, next, log_prob, scale))
        };
        let (mean, next, log_prob, scale) = if k + tail >= steps.len() { run()? } else { ndgrad::paused(run)? };
        for (i, rec) in records.iter_mut().enumerate() {
            rec.push(StepRecord {
                t: step.t,
                t_prev: step.t_prev,
                x_t: row(&x, i),
                scale,
                mean: row(&mean, i),
                x_prev: row(&next, i),
                sigma2: step.sigma2,
                log_prob: log_prob[i],
            });
        }
        x = next;
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    let reweights = guide.reweights();
    let trajectories = records
        .into_iter()
        .enumerate()
        .map(|(i, steps)| Trajectory {
            condition: guide.conditions()[i].clone(),
            reweights: reweights.get(i).cloned().unwrap_or_default(),
            seed,
            stream: streams[i],
            steps,
            x0: row(&x, i),
        })
        .collect();
    Ok(Sample { trajectories, x0: x })
}

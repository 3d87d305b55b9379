use ndgrad::Tensor;

use crate::error::{Error, Result};

/// Per-timestep constants of the forward process, indexed by `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Constants for one reverse transition `t -> t_prev`.
///
/// At full resolution `t_prev = t - 1` and the fields are the schedule's own
/// values. A strided step folds the skipped steps into one transition:
/// `beta = 1 - alpha_bar(t) / alpha_bar(t_prev)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConstants {
    pub t: usize,
    pub t_prev: usize,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub sigma2: f64,
}

impl StepConstants {
    /// The transition into `x_0`, taken deterministically.
    pub fn is_final(&self) -> bool {
        self.t_prev == 0
    }
}

impl NoiseSchedule {
    /// Linear `beta` from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let valid = steps >= 1 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
        if !valid {
            return Err(Error::InvalidSchedule {
                steps,
                beta_start,
                beta_end,
            });
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// Transition variance; equal to `beta`.
    pub fn sigma2(&self, t: usize) -> Result<f64> {
        self.beta(t)
    }

    /// Full-resolution step `t -> t - 1`.
    pub fn step(&self, t: usize) -> Result<StepConstants> {
        let i = self.index(t)?;
        Ok(StepConstants {
            t,
            t_prev: t - 1,
            alpha: self.alpha[i],
            beta: self.beta[i],
            alpha_bar: self.alpha_bar[i],
            sigma2: self.beta[i],
        })
    }

    /// Step `t -> t_prev` with the skipped steps folded in.
    pub fn jump(&self, t: usize, t_prev: usize) -> Result<StepConstants> {
        if t_prev >= t {
            return Err(Error::TimestepOutOfRange { t: t_prev, max: t - 1 });
        }
        if t_prev + 1 == t {
            return self.step(t);
        }
        let alpha_bar = self.alpha_bar(t)?;
        let alpha = alpha_bar / self.alpha_bar(t_prev)?;
        let beta = 1.0 - alpha;
        Ok(StepConstants {
            t,
            t_prev,
            alpha,
            beta,
            alpha_bar,
            sigma2: beta,
        })
    }

    /// Visited timesteps `round(k*T/n)` for `k = n..1`, largest first.
    pub fn visited(&self, n_steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if n_steps == 0 || n_steps > total {
            return Err(Error::TooManySteps { n_steps, max: total });
        }
        // Integer round-half-up of k*T/n.
        Ok((1..=n_steps).rev().map(|k| (2 * k * total + n_steps) / (2 * n_steps)).collect())
    }

    /// Reverse-process steps for `n_steps`-step sampling, in visiting order.
    pub fn sampling_steps(&self, n_steps: usize) -> Result<Vec<StepConstants>> {
        let ts = self.visited(n_steps)?;
        ts.iter()
            .enumerate()
            .map(|(k, &t)| self.jump(t, ts.get(k + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// `x_t = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`, one timestep per row of `[B, D]` inputs.
    pub fn q_sample(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        let (signal, noise) = self.row_coefficients(x0.shape(), ts)?;
        Ok(x0.mul(&signal)?.add(&eps.mul(&noise)?)?)
    }

    fn row_coefficients(&self, shape: &[usize], ts: &[usize]) -> Result<(Tensor, Tensor)> {
        let [rows, dim] = shape else {
            return Err(ndgrad::Error::Rank {
                op: "q_sample",
                rank: shape.len(),
            }
            .into());
        };
        if ts.len() != *rows {
            return Err(Error::BatchSize {
                what: "q_sample timesteps",
                expected: *rows,
                got: ts.len(),
            });
        }
        let mut signal = Vec::with_capacity(rows * dim);
        let mut noise = Vec::with_capacity(rows * dim);
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            if t == 0 {
                return Err(Error::TimestepOutOfRange { t, max: self.len() });
            }
            signal.extend(std::iter::repeat(ab.sqrt()).take(*dim));
            noise.extend(std::iter::repeat((1.0 - ab).sqrt()).take(*dim));
        }
        Ok((Tensor::new(signal, shape)?, Tensor::new(noise, shape)?))
    }
}

/// Mean of the reverse transition given a noise estimate:
/// `(x_t - beta / sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha)`.
pub fn transition_mean(x_t: &Tensor, step: &StepConstants, eps_hat: &Tensor) -> Result<Tensor> {
    if step.t == 0 {
        return Err(Error::TimestepOutOfRange { t: 0, max: usize::MAX });
    }
    let eps_coef = step.beta / (1.0 - step.alpha_bar).sqrt();
    Ok(x_t.sub(&eps_hat.scale(eps_coef))?.scale(1.0 / step.alpha.sqrt()))
}

/// Draws `x_{t-1} = mean + sqrt(sigma2) * noise` row-wise and returns it with
/// each row's Gaussian log density. The final step returns `mean` with
/// log-prob 0.
pub fn sample_transition(mean: &Tensor, step: &StepConstants, noise: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let rows = mean.shape().first().copied().unwrap_or(1);
    if step.is_final() {
        return Ok((mean.clone(), vec![0.0; rows]));
    }
    if step.sigma2.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::NonPositiveVariance(step.sigma2));
    }
    let x = mean.add(&noise.scale(step.sigma2.sqrt()))?;
    let log_prob = gaussian_log_density(&x.detach(), &mean.detach(), step.sigma2)?.to_vec();
    Ok((x, log_prob))
}

/// Row-wise isotropic Gaussian log density of `x` under `N(mean, sigma2 I)`,
/// differentiable in both arguments. Rank-1 inputs are one row.
pub fn gaussian_log_density(x: &Tensor, mean: &Tensor, sigma2: f64) -> Result<Tensor> {
    if sigma2.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::NonPositiveVariance(sigma2));
    }
    let dim = *x.shape().last().unwrap_or(&1) as f64;
    let sq = x.sub(mean)?.square();
    let sq = if sq.rank() == 2 { sq.sum_axis(1)? } else { sq.sum().reshape(&[1])? };
    let norm = -0.5 * dim * (2.0 * std::f64::consts::PI * sigma2).ln();
    Ok(sq.scale(-0.5 / sigma2).shift(norm))
}

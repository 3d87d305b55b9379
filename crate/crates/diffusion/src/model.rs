//! Noise-prediction network.
//!
//! A tanh MLP `f(x, t, e)` sees the scaled point, sinusoidal time features
//! and one embedding row. A condition's rows are composed around the null
//! row: `eps = f(null) + sum_j w_j (f(row_j) - f(null))` with `w_0 = 1` and
//! `w_1 = second_token_weight`. Padding a slot with the null row therefore
//! contributes exactly zero, and the unconditional prediction is `f(null)`.

use ndgrad::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::{Condition, Token, MAX_TOKENS};

pub const DATA_DIM: usize = 2;
pub const TIME_FEATURES: usize = 8;
/// Standard deviation of the adapter down-projection at initialisation.
pub const ADAPTER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding rows including the null row.
    pub table_rows: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub second_token_weight: f64,
    /// Per-coordinate RMS of clean data.
    pub input_scale: f64,
}

impl ModelConfig {
    fn input_width(&self) -> usize {
        DATA_DIM + TIME_FEATURES + self.embed_dim
    }

    /// `(fan_in, fan_out)` of each layer.
    pub fn layer_dims(&self) -> [(usize, usize); 3] {
        [
            (self.input_width(), self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, DATA_DIM),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.table_rows < 2 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidCondition(format!("degenerate model config {self:?}")));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0 && self.second_token_weight.is_finite()) {
            return Err(Error::InvalidCondition(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

/// `x @ weight + bias`, with `weight` laid out `[fan_in, fan_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Low-rank delta `down @ up` added to a frozen weight.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub down: Tensor,
    pub up: Tensor,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Embedding table and layer weights; trained during pretraining only.
    Base,
    /// Adapter factors; the only parameters fine-tuning touches.
    Adapter,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<Linear>,
    /// One slot per layer; `None` where the rank would not be low.
    pub adapters: Vec<Option<Adapter>>,
}

/// Per-row time inputs: timesteps, sinusoidal features and input gain.
#[derive(Debug, Clone)]
pub struct TimeBatch {
    pub timesteps: Vec<usize>,
    features: Tensor,
    gain: Tensor,
}

/// Embedding rows fed to the network, one `[B, embed_dim]` tensor per slot.
#[derive(Debug, Clone)]
pub struct Slots {
    slots: Vec<Tensor>,
    null: Tensor,
    active: Vec<bool>,
}

/// Conditional (composed) and unconditional noise predictions.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub cond: Tensor,
    pub uncond: Tensor,
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Ok(Tensor::new((0..n).map(|_| dist.sample(rng)).collect(), shape)?)
}

impl DenoiserParams {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let embedding = {
            let dist = Normal::new(0.0, 0.5).expect("valid normal");
            let n = config.table_rows * config.embed_dim;
            Tensor::new((0..n).map(|_| dist.sample(rng)).collect(), &[config.table_rows, config.embed_dim])?
        };
        let mut layers = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            layers.push(Linear {
                weight: uniform_tensor(rng, &[fan_in, fan_out], bound)?,
                bias: uniform_tensor(rng, &[fan_out], bound)?,
            });
        }
        let adapters = vec![None; layers.len()];
        Ok(Self {
            config,
            embedding,
            layers,
            adapters,
        })
    }

    /// Adds fresh adapters (`down ~ N(0, 0.01^2)`, `up = 0`) to every layer
    /// whose smaller dimension exceeds `rank`. The effective weights are
    /// unchanged until `up` moves.
    pub fn attach_adapters(&mut self, rank: usize, rng: &mut impl Rng) -> Result<()> {
        let limit = self.config.layer_dims().iter().map(|(i, o)| (*i).min(*o)).max().unwrap_or(0);
        if rank == 0 || rank >= limit {
            return Err(Error::InvalidAdapterRank { rank, limit });
        }
        let dist = Normal::new(0.0, ADAPTER_INIT_STD).expect("valid normal");
        self.adapters = self
            .config
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| {
                if rank >= fan_in.min(fan_out) {
                    return Ok(None);
                }
                let down = Tensor::new((0..fan_in * rank).map(|_| dist.sample(rng)).collect(), &[fan_in, rank])?;
                Ok(Some(Adapter {
                    down,
                    up: Tensor::zeros(&[rank, fan_out]),
                }))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        self.adapters.iter().flatten().map(Adapter::rank).next()
    }

    /// `base + down @ up` per layer.
    pub fn effective_weights(&self) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .zip(&self.adapters)
            .map(|(layer, adapter)| match adapter {
                Some(a) => Ok(layer.weight.add(&a.down.matmul(&a.up)?)?),
                None => Ok(layer.weight.clone()),
            })
            .collect()
    }

    /// Block names and tensors in canonical order.
    pub fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &layer.weight));
            out.push((format!("layer{i}.bias"), &layer.bias));
        }
        for (i, a) in self.adapters.iter().enumerate() {
            if let Some(a) = a {
                out.push((format!("layer{i}.adapter.down"), &a.down));
                out.push((format!("layer{i}.adapter.up"), &a.up));
            }
        }
        out
    }

    fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Base => {
                let mut out = vec![&mut self.embedding];
                for l in &mut self.layers {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                out
            }
            ParamGroup::Adapter => self
                .adapters
                .iter_mut()
                .flatten()
                .flat_map(|a| [&mut a.down, &mut a.up])
                .collect(),
        }
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Base => {
                let mut out = vec![&self.embedding];
                for l in &self.layers {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
                out
            }
            ParamGroup::Adapter => self.adapters.iter().flatten().flat_map(|a| [&a.down, &a.up]).collect(),
        }
    }

    /// Copy whose `group` tensors are fresh tape leaves. Call inside
    /// [`ndgrad::record`]; the returned tensors are the ones to query for gradients.
    pub fn tracked(&self, group: ParamGroup) -> Result<Self> {
        let mut out = self.clone();
        for t in out.group_mut(group) {
            *t = Tensor::variable(t.to_vec(), t.shape())?;
        }
        Ok(out)
    }

    pub fn values(&self, group: ParamGroup) -> Vec<Vec<f64>> {
        self.group(group).into_iter().map(Tensor::to_vec).collect()
    }

    pub fn set_values(&mut self, group: ParamGroup, values: Vec<Vec<f64>>) -> Result<()> {
        let slots = self.group_mut(group);
        if slots.len() != values.len() {
            return Err(Error::BatchSize {
                what: "parameter blocks",
                expected: slots.len(),
                got: values.len(),
            });
        }
        for (t, v) in slots.into_iter().zip(values) {
            *t = Tensor::new(v, t.shape())?;
        }
        Ok(())
    }

    pub fn embedding_row(&self, token: Token) -> Result<Vec<f64>> {
        let d = self.config.embed_dim;
        let k = token.0 as usize;
        if k >= self.config.table_rows {
            return Err(Error::InvalidCondition(format!("token {k} has no embedding row")));
        }
        Ok(self.embedding.data()[k * d..(k + 1) * d].to_vec())
    }

    pub fn null_row(&self) -> Vec<f64> {
        self.embedding.data()[..self.config.embed_dim].to_vec()
    }

    /// Ordered embedding rows of a condition.
    pub fn condition_rows(&self, c: &Condition) -> Result<Vec<Vec<f64>>> {
        c.tokens().iter().map(|&t| self.embedding_row(t)).collect()
    }

    pub fn time_batch(&self, sched: &NoiseSchedule, timesteps: &[usize]) -> Result<TimeBatch> {
        let total = sched.len() as f64;
        let s2 = self.config.input_scale.powi(2);
        let mut features = Vec::with_capacity(timesteps.len() * TIME_FEATURES);
        let mut gain = Vec::with_capacity(timesteps.len() * DATA_DIM);
        for &t in timesteps {
            let ab = sched.alpha_bar(t)?;
            if t == 0 {
                return Err(Error::TimestepOutOfRange { t, max: sched.len() });
            }
            let u = t as f64 / total;
            let freqs = (0..TIME_FEATURES / 2).map(|k| (1u32 << k) as f64 * std::f64::consts::PI * u);
            features.extend(freqs.clone().map(f64::sin));
            features.extend(freqs.map(f64::cos));
            let g = 1.0 / (ab * s2 + 1.0 - ab).sqrt();
            gain.extend([g; DATA_DIM]);
        }
        let rows = timesteps.len();
        Ok(TimeBatch {
            timesteps: timesteps.to_vec(),
            features: Tensor::new(features, &[rows, TIME_FEATURES])?,
            gain: Tensor::new(gain, &[rows, DATA_DIM])?,
        })
    }

    /// Slots looked up from the (possibly tracked) embedding table, so
    /// gradients reach the embedding during pretraining.
    pub fn token_slots(&self, conditions: &[Condition]) -> Result<Slots> {
        let rows = conditions.len();
        if rows == 0 {
            return Err(Error::EmptyBatch);
        }
        let v = self.config.table_rows;
        let one_hot = |pick: &dyn Fn(&Condition) -> Token| -> Result<Tensor> {
            let mut m = vec![0.0; rows * v];
            for (i, c) in conditions.iter().enumerate() {
                let k = pick(c).0 as usize;
                if k >= v {
                    return Err(Error::InvalidCondition(format!("token {k} has no embedding row")));
                }
                m[i * v + k] = 1.0;
            }
            Ok(Tensor::new(m, &[rows, v])?.matmul(&self.embedding)?)
        };
        let null = one_hot(&|_| Token::NULL)?;
        let mut slots = Vec::with_capacity(MAX_TOKENS);
        let mut active = Vec::with_capacity(MAX_TOKENS);
        for j in 0..MAX_TOKENS {
            let used = j == 0 || conditions.iter().any(|c| c.len() > j);
            active.push(used);
            slots.push(if used {
                one_hot(&|c| c.tokens().get(j).copied().unwrap_or(Token::NULL))?
            } else {
                null.clone()
            });
        }
        Ok(Slots { slots, null, active })
    }

    /// Evaluates the composed prediction and the null-condition prediction.
    pub fn predict(&self, x: &Tensor, time: &TimeBatch, slots: &Slots) -> Result<Prediction> {
        let rows = time.timesteps.len();
        if x.shape() != [rows, DATA_DIM] || slots.rows() != rows {
            return Err(Error::BatchSize {
                what: "denoiser input",
                expected: rows,
                got: x.shape().first().copied().unwrap_or(0),
            });
        }
        let weights = self.effective_weights()?;
        let biases = self
            .layers
            .iter()
            .map(|l| l.bias.repeat_rows(rows))
            .collect::<ndgrad::Result<Vec<_>>>()?;
        let head = Tensor::concat(&[&x.mul(&time.gain)?, &time.features], 1)?;
        let mlp = |cond: &Tensor| -> Result<Tensor> {
            let mut h = Tensor::concat(&[&head, cond], 1)?;
            let last = weights.len() - 1;
            for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
                h = h.matmul(w)?.add(b)?;
                if i < last {
                    h = h.tanh();
                }
            }
            Ok(h)
        };
        let uncond = mlp(&slots.null)?;
        let mut cond = uncond.clone();
        let mut weight = 1.0;
        for (slot, &active) in slots.slots.iter().zip(&slots.active) {
            if active {
                let delta = mlp(slot)?.sub(&uncond)?;
                cond = cond.add(&delta.scale(weight))?;
            }
            weight *= self.config.second_token_weight;
        }
        Ok(Prediction { cond, uncond })
    }
}

impl Slots {
    /// Constant slots from explicit rows per batch item (already reweighted
    /// if needed). Missing trailing rows are padded with `null_row`.
    pub fn from_rows(items: &[Vec<Vec<f64>>], null_row: &[f64]) -> Result<Self> {
        let rows = items.len();
        if rows == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = null_row.len();
        if let Some(bad) = items.iter().find(|r| r.is_empty() || r.len() > MAX_TOKENS || r.iter().any(|v| v.len() != d)) {
            return Err(Error::InvalidCondition(format!("condition with {} rows", bad.len())));
        }
        let null = Tensor::new(null_row.repeat(rows), &[rows, d])?;
        let mut slots = Vec::with_capacity(MAX_TOKENS);
        let mut active = Vec::with_capacity(MAX_TOKENS);
        for j in 0..MAX_TOKENS {
            let used = j == 0 || items.iter().any(|r| r.len() > j);
            active.push(used);
            if used {
                let mut m = Vec::with_capacity(rows * d);
                for r in items {
                    m.extend_from_slice(r.get(j).map(Vec::as_slice).unwrap_or(null_row));
                }
                slots.push(Tensor::new(m, &[rows, d])?);
            } else {
                slots.push(null.clone());
            }
        }
        Ok(Self { slots, null, active })
    }

    pub fn rows(&self) -> usize {
        self.null.shape()[0]
    }
}

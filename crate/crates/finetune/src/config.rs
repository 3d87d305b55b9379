use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Clipped importance-weighted policy gradient over denoising steps.
    Ddpo,
    /// Reward gradient backpropagated through the sampling chain.
    Backprop,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ddpo => "ddpo",
            Method::Backprop => "backprop",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpo" => Ok(Method::Ddpo),
            "backprop" => Ok(Method::Backprop),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub method: Method,
    pub iterations: usize,
    pub batch: usize,
    pub steps: usize,
    pub clip: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Exploration runs while `iteration < explore_fraction * iterations`.
    pub explore_fraction: f64,
    pub normalize_advantages: bool,
    pub epochs: usize,
    pub adapter_rank: usize,
    /// Backprop only: differentiate through the last `k` steps. `None` is the full chain.
    pub trunc_k: Option<usize>,
    pub eval_every: usize,
    pub eval_n: usize,
}

impl FineTuneConfig {
    pub fn ddpo() -> Self {
        Self {
            method: Method::Ddpo,
            iterations: 100,
            batch: 64,
            steps: 50,
            clip: 1e-4,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            explore_fraction: 0.75,
            normalize_advantages: true,
            epochs: 1,
            adapter_rank: 4,
            trunc_k: None,
            eval_every: 10,
            eval_n: 10,
        }
    }

    pub fn backprop() -> Self {
        Self {
            method: Method::Backprop,
            lr: 1e-3,
            ..Self::ddpo()
        }
    }

    pub fn for_method(method: Method) -> Self {
        match method {
            Method::Ddpo => Self::ddpo(),
            Method::Backprop => Self::backprop(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.explore_fraction) {
            return fail(format!("explore_fraction {} outside [0, 1]", self.explore_fraction));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return fail(format!("clip range must be positive, got {}", self.clip));
        }
        if self.batch < 2 {
            return fail(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.steps == 0 || self.epochs == 0 || self.eval_every == 0 || self.eval_n == 0 {
            return fail("steps, epochs, eval_every and eval_n must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {}", self.lr));
        }
        if self.trunc_k == Some(0) {
            return fail("trunc_k must be at least 1".into());
        }
        Ok(())
    }

    /// Number of leading iterations that explore: `ceil(fraction * total)`,
    /// with products within rounding error of an integer snapped to it.
    pub fn exploration_iterations(&self) -> usize {
        let x = self.explore_fraction * self.iterations as f64;
        let nearest = x.round();
        if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
            nearest as usize
        } else {
            x.ceil() as usize
        }
    }

    pub fn exploration_active(&self, iteration: usize) -> bool {
        iteration < self.exploration_iterations()
    }
}

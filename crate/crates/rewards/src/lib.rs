//! Rewards `r(x0, c)` on the plane and the metrics built from them.
//!
//! All reward kinds are bounded in `[0, 1]` and depend only on the final
//! point and the condition. Training-time evaluations go through a
//! [`RewardQueryCounter`]; metric evaluations use [`RewardSpec::score`]
//! directly and are not counted.

mod eval;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use diffusion::{Condition, ConditionVocabulary};
use ndgrad::Tensor;
use thiserror::Error;

pub use eval::{batch_diversity, evaluate, holdout_reward, EvalProtocol, EvalResult};

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-differentiable reward {0} has no gradient")]
    NonDifferentiable(RewardKind),
    #[error("unknown reward kind {0:?}")]
    UnknownKind(String),
    #[error("length scale must be positive and finite, got {0}")]
    LengthScale(f64),
    #[error("condition {0} has no concept anchors")]
    NoAnchors(String),
    #[error("diversity needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("condition {0} is in both the training and the unseen set")]
    Overlap(String),
    #[error("{what}: {expected} points but {got} conditions")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Diffusion(#[from] diffusion::Error),
    #[error(transparent)]
    Guidance(#[from] guidance::Error),
    #[error(transparent)]
    Tensor(#[from] ndgrad::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// `exp(-|x - centre(c)|^2 / rho^2)`.
    Proximity,
    /// Product of per-token proximities; peaks between the anchors.
    Conflicting,
    /// 1 within `rho` of every token anchor, else 0.
    Indicator,
}

impl RewardKind {
    pub fn is_differentiable(self) -> bool {
        !matches!(self, RewardKind::Indicator)
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::Proximity => "proximity",
            RewardKind::Conflicting => "conflicting",
            RewardKind::Indicator => "indicator",
        })
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proximity" => Ok(Self::Proximity),
            "conflicting" => Ok(Self::Conflicting),
            "indicator" => Ok(Self::Indicator),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub rho: f64,
    pub vocab: ConditionVocabulary,
}

impl RewardSpec {
    pub fn new(kind: RewardKind, rho: f64, vocab: ConditionVocabulary) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::LengthScale(rho));
        }
        Ok(Self { kind, rho, vocab })
    }

    fn anchors(&self, c: &Condition) -> Result<Vec<[f64; 2]>> {
        let anchors: Vec<[f64; 2]> = c.tokens().iter().filter_map(|&t| self.vocab.anchor(t)).collect();
        if anchors.len() != c.len() {
            return Err(Error::NoAnchors(c.to_string()));
        }
        Ok(anchors)
    }

    fn centre(anchors: &[[f64; 2]]) -> [f64; 2] {
        let n = anchors.len() as f64;
        [
            anchors.iter().map(|a| a[0]).sum::<f64>() / n,
            anchors.iter().map(|a| a[1]).sum::<f64>() / n,
        ]
    }

    fn sq(x: [f64; 2], a: [f64; 2]) -> f64 {
        (x[0] - a[0]).powi(2) + (x[1] - a[1]).powi(2)
    }

    /// Reward of one point; does not touch any counter.
    pub fn score(&self, x: [f64; 2], c: &Condition) -> Result<f64> {
        let anchors = self.anchors(c)?;
        let r2 = self.rho * self.rho;
        Ok(match self.kind {
            RewardKind::Proximity => (-Self::sq(x, Self::centre(&anchors)) / r2).exp(),
            RewardKind::Conflicting => (-anchors.iter().map(|&a| Self::sq(x, a)).sum::<f64>() / r2).exp(),
            RewardKind::Indicator => {
                let inside = anchors.iter().all(|&a| Self::sq(x, a) <= r2);
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    pub fn score_batch(&self, xs: &[[f64; 2]], cs: &[Condition]) -> Result<Vec<f64>> {
        if xs.len() != cs.len() {
            return Err(Error::Length {
                what: "score_batch",
                expected: xs.len(),
                got: cs.len(),
            });
        }
        xs.iter().zip(cs).map(|(&x, c)| self.score(x, c)).collect()
    }

    /// Differentiable rewards of a `[B, 2]` tensor, one per row.
    pub fn score_tensor(&self, x: &Tensor, cs: &[Condition]) -> Result<Tensor> {
        if !self.kind.is_differentiable() {
            return Err(Error::NonDifferentiable(self.kind));
        }
        let rows = x.shape().first().copied().unwrap_or(0);
        if rows != cs.len() {
            return Err(Error::Length {
                what: "score_tensor",
                expected: rows,
                got: cs.len(),
            });
        }
        // Each row's targets: its centre (proximity) or every anchor (conflicting).
        let targets: Vec<Vec<[f64; 2]>> = cs
            .iter()
            .map(|c| {
                let a = self.anchors(c)?;
                Ok(match self.kind {
                    RewardKind::Proximity => vec![Self::centre(&a)],
                    _ => a,
                })
            })
            .collect::<Result<_>>()?;
        let slots = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut exponent: Option<Tensor> = None;
        for j in 0..slots {
            let mut anchor = Vec::with_capacity(rows * 2);
            let mut mask = Vec::with_capacity(rows);
            for t in &targets {
                let a = t.get(j).copied().unwrap_or([0.0, 0.0]);
                anchor.extend(a);
                mask.push(if j < t.len() { 1.0 } else { 0.0 });
            }
            let d = x.sub(&Tensor::new(anchor, &[rows, 2])?)?.square().sum_axis(1)?;
            let d = if mask.iter().all(|&m| m == 1.0) { d } else { d.mul(&Tensor::new(mask, &[rows])?)? };
            exponent = Some(match exponent {
                Some(e) => e.add(&d)?,
                None => d,
            });
        }
        let exponent = exponent.ok_or(Error::NoAnchors("empty batch".into()))?;
        Ok(exponent.scale(-1.0 / (self.rho * self.rho)).exp())
    }

    /// Gradient of the reward with respect to the point.
    pub fn gradient(&self, x: [f64; 2], c: &Condition) -> Result<[f64; 2]> {
        let (out, tape) = ndgrad::record(|| -> Result<_> {
            let xt = Tensor::variable(x.to_vec(), &[1, 2])?;
            let r = self.score_tensor(&xt, std::slice::from_ref(c))?.sum();
            Ok((xt, r))
        })?;
        let (xt, r) = out?;
        let g = tape.backward(&r)?.wrt_or_zeros(&xt);
        Ok([g.data()[0], g.data()[1]])
    }

    /// Supremum of the reward over the plane for condition `c`.
    pub fn max_value(&self, c: &Condition) -> Result<f64> {
        let anchors = self.anchors(c)?;
        match self.kind {
            RewardKind::Proximity => Ok(1.0),
            RewardKind::Conflicting => self.score(Self::centre(&anchors), c),
            RewardKind::Indicator => {
                let centre = Self::centre(&anchors);
                let inside = anchors.iter().all(|&a| Self::sq(centre, a) <= self.rho * self.rho);
                Ok(if inside { 1.0 } else { 0.0 })
            }
        }
    }
}

/// Monotone count of training-time reward evaluations.
#[derive(Debug, Default)]
pub struct RewardQueryCounter(AtomicU64);

impl RewardQueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    /// Scores a batch and counts one query per point.
    pub fn query(&self, spec: &RewardSpec, xs: &[[f64; 2]], cs: &[Condition]) -> Result<Vec<f64>> {
        let out = spec.score_batch(xs, cs)?;
        self.0.fetch_add(out.len() as u64, Ordering::SeqCst);
        Ok(out)
    }

    /// Differentiable variant of [`RewardQueryCounter::query`].
    pub fn query_tensor(&self, spec: &RewardSpec, x: &Tensor, cs: &[Condition]) -> Result<Tensor> {
        let out = spec.score_tensor(x, cs)?;
        self.0.fetch_add(cs.len() as u64, Ordering::SeqCst);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: RewardKind) -> RewardSpec {
        let vocab = ConditionVocabulary::new(8, 400.0).unwrap();
        let chord = 2.0 * 400.0 * (std::f64::consts::PI / 8.0).sin();
        RewardSpec::new(kind, chord / 4.0, vocab).unwrap()
    }

    #[test]
    fn proximity_peaks_at_anchor() {
        let s = spec(RewardKind::Proximity);
        let a = s.vocab.anchor(diffusion::Token(2)).unwrap();
        assert_eq!(s.score(a, &Condition::single(2)).unwrap(), 1.0);
    }

    #[test]
    fn conflicting_at_one_anchor_is_tiny() {
        let s = spec(RewardKind::Conflicting);
        let a = s.vocab.anchor(diffusion::Token(1)).unwrap();
        let r = s.score(a, &Condition::pair(1, 2).unwrap()).unwrap();
        assert!((r - (-16.0f64).exp()).abs() <= 1e-12 * (-16.0f64).exp(), "{r}");
    }

    #[test]
    fn indicator_has_no_gradient() {
        let s = spec(RewardKind::Indicator);
        assert!(matches!(
            s.gradient([0.0, 0.0], &Condition::single(1)),
            Err(Error::NonDifferentiable(RewardKind::Indicator))
        ));
        let a = s.vocab.anchor(diffusion::Token(1)).unwrap();
        assert_eq!(s.score(a, &Condition::single(1)).unwrap(), 1.0);
        assert_eq!(s.score([0.0, 0.0], &Condition::single(1)).unwrap(), 0.0);
    }

    #[test]
    fn null_condition_rejected() {
        assert!(spec(RewardKind::Proximity).score([0.0, 0.0], &Condition::null()).is_err());
    }

    #[test]
    fn tensor_scores_match_scalar_scores() {
        for kind in [RewardKind::Proximity, RewardKind::Conflicting] {
            let s = spec(kind);
            let cs = vec![Condition::single(3), Condition::pair(1, 2).unwrap()];
            let xs = [[10.0, 350.0], [300.0, 100.0]];
            let t = s.score_tensor(&Tensor::new(xs.iter().flatten().copied().collect(), &[2, 2]).unwrap(), &cs).unwrap();
            let want = s.score_batch(&xs, &cs).unwrap();
            for (a, b) in t.data().iter().zip(want) {
                assert!((a - b).abs() <= 1e-15 + 1e-12 * b);
            }
        }
    }

    #[test]
    fn counter_counts_points() {
        let s = spec(RewardKind::Proximity);
        let c = RewardQueryCounter::new();
        c.query(&s, &[[0.0, 0.0]; 5], &vec![Condition::single(1); 5]).unwrap();
        c.query_tensor(&s, &Tensor::zeros(&[3, 2]), &vec![Condition::single(1); 3]).unwrap();
        assert_eq!(c.count(), 8);
    }
}

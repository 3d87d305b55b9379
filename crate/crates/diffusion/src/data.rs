use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::vocab::{Condition, ConditionVocabulary, Token};

/// Generator for the pretraining set: an isotropic Gaussian around each
/// concept anchor. Pair conditions are absent unless `pair_probability > 0`,
/// in which case their points sit around the midpoint of the two anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDatasetSpec {
    pub vocab: ConditionVocabulary,
    pub spread: f64,
    pub samples_per_concept: usize,
    pub pair_probability: f64,
    pub train_pairs: Vec<Condition>,
    pub unseen_pairs: Vec<Condition>,
}

impl ToyDatasetSpec {
    /// Per-coordinate RMS of the data, used to normalise network inputs.
    pub fn data_scale(&self) -> f64 {
        (self.vocab.radius().powi(2) / 2.0 + self.spread.powi(2)).sqrt()
    }

    /// Rejects unseen pairs that also appear in the training list.
    pub fn validate(&self) -> Result<()> {
        for c in self.train_pairs.iter().chain(&self.unseen_pairs) {
            self.vocab.validate(c)?;
        }
        if let Some(c) = self.unseen_pairs.iter().find(|c| self.train_pairs.contains(c)) {
            return Err(Error::InvalidCondition(format!("{c} is both a training and an unseen condition")));
        }
        if !(0.0..=1.0).contains(&self.pair_probability) {
            return Err(Error::InvalidCondition(format!("pair probability {}", self.pair_probability)));
        }
        Ok(())
    }

    pub fn generate(&self, rng: &mut impl Rng) -> Result<ToyDataset> {
        self.validate()?;
        let total = self.samples_per_concept * self.vocab.concepts();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut points = Vec::with_capacity(total);
        let mut conditions = Vec::with_capacity(total);
        for k in 1..=self.vocab.concepts() as u16 {
            for _ in 0..self.samples_per_concept {
                let use_pair = !self.train_pairs.is_empty() && rng.gen::<f64>() < self.pair_probability;
                let (centre, cond) = if use_pair {
                    let c = &self.train_pairs[rng.gen_range(0..self.train_pairs.len())];
                    (self.centre(c), c.clone())
                } else {
                    (self.centre(&Condition::single(k)), Condition::single(k))
                };
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                points.push([centre[0] + self.spread * dx, centre[1] + self.spread * dy]);
                conditions.push(cond);
            }
        }
        Ok(ToyDataset { points, conditions })
    }

    /// Mean of the condition's token anchors.
    pub fn centre(&self, c: &Condition) -> [f64; 2] {
        let anchors: Vec<[f64; 2]> = c.tokens().iter().filter_map(|&t| self.vocab.anchor(t)).collect();
        if anchors.is_empty() {
            return [0.0, 0.0];
        }
        let n = anchors.len() as f64;
        [
            anchors.iter().map(|a| a[0]).sum::<f64>() / n,
            anchors.iter().map(|a| a[1]).sum::<f64>() / n,
        ]
    }
}

/// Materialised `(x0, condition)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub points: Vec<[f64; 2]>,
    pub conditions: Vec<Condition>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of examples whose condition has more than one token.
    pub fn pair_count(&self) -> usize {
        self.conditions.iter().filter(|c| c.len() > 1).count()
    }

    pub fn tokens_used(&self) -> impl Iterator<Item = Token> + '_ {
        self.conditions.iter().flat_map(|c| c.tokens().iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn spec(samples: usize, pair_probability: f64) -> ToyDatasetSpec {
        ToyDatasetSpec {
            vocab: ConditionVocabulary::new(8, 400.0).unwrap(),
            spread: 80.0,
            samples_per_concept: samples,
            pair_probability,
            train_pairs: vec![Condition::pair(1, 2).unwrap()],
            unseen_pairs: vec![Condition::pair(2, 3).unwrap()],
        }
    }

    #[test]
    fn pairs_absent_by_default() {
        let d = spec(50, 0.0).generate(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.len(), 400);
        assert_eq!(d.pair_count(), 0);
    }

    #[test]
    fn pair_probability_adds_pairs() {
        let d = spec(200, 0.5).generate(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(d.pair_count() > 0);
    }

    #[test]
    fn empty_and_overlapping_rejected() {
        assert!(matches!(
            spec(0, 0.0).generate(&mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyDataset)
        ));
        let mut s = spec(1, 0.0);
        s.unseen_pairs.push(Condition::pair(1, 2).unwrap());
        assert!(s.validate().is_err());
    }
}

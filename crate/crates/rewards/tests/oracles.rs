use diffusion::{Condition, ConditionVocabulary, DenoiserParams, ModelConfig, NoiseSchedule};
use guidance::GuidanceSchedule;
use ndgrad::check::{numeric_gradient, relative_error};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rewards::{batch_diversity, evaluate, holdout_reward, EvalProtocol, Error, RewardKind, RewardQueryCounter, RewardSpec};

const RADIUS: f64 = 400.0;

fn rho() -> f64 {
    2.0 * RADIUS * (std::f64::consts::PI / 8.0).sin() / 4.0
}

fn spec(kind: RewardKind) -> RewardSpec {
    RewardSpec::new(kind, rho(), ConditionVocabulary::new(8, RADIUS).unwrap()).unwrap()
}

fn conditions() -> Vec<Condition> {
    vec![Condition::single(3), Condition::pair(1, 2).unwrap(), Condition::pair(5, 6).unwrap()]
}

proptest! {
    #[test]
    fn reward_gradients_match_central_differences(
        kind in prop_oneof![Just(RewardKind::Proximity), Just(RewardKind::Conflicting)],
        which in 0usize..3,
        offset in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let spec = spec(kind);
        let c = conditions()[which].clone();
        let centre = spec.vocab.anchor(c.tokens()[0]).unwrap();
        // Stay within about one length scale of an anchor, where the reward is not underflowing.
        let x = [centre[0] + offset[0] * rho(), centre[1] + offset[1] * rho()];
        let analytic = spec.gradient(x, &c).unwrap();
        let numeric = numeric_gradient(|p| spec.score([p[0], p[1]], &c).unwrap(), &x, 1e-3);
        prop_assert!(relative_error(&analytic, &numeric) <= 1e-4, "{:?} vs {:?}", analytic, numeric);
    }

    #[test]
    fn rewards_stay_in_unit_interval(x in prop::collection::vec(-900.0f64..900.0, 2), which in 0usize..3) {
        for kind in [RewardKind::Proximity, RewardKind::Conflicting, RewardKind::Indicator] {
            let r = spec(kind).score([x[0], x[1]], &conditions()[which]).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn conflicting_reward_peaks_at_pair_midpoint() {
    let spec = spec(RewardKind::Conflicting);
    let c = Condition::pair(1, 2).unwrap();
    let (a, b) = (spec.vocab.anchor(c.tokens()[0]).unwrap(), spec.vocab.anchor(c.tokens()[1]).unwrap());
    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    // Coarse grid over the box spanned by the anchors, then a fine grid around the best cell.
    let search = |lo: [f64; 2], hi: [f64; 2], n: usize| {
        let mut best = (f64::MIN, [0.0; 2]);
        for i in 0..=n {
            for j in 0..=n {
                let p = [lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64, lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64];
                let r = spec.score(p, &c).unwrap();
                if r > best.0 {
                    best = (r, p);
                }
            }
        }
        best.1
    };
    let coarse = search([a[0].min(b[0]), a[1].min(b[1])], [a[0].max(b[0]), a[1].max(b[1])], 200);
    let h = 2.0;
    let fine = search([coarse[0] - h, coarse[1] - h], [coarse[0] + h, coarse[1] + h], 4000);
    assert!((fine[0] - mid[0]).hypot(fine[1] - mid[1]) <= 1e-3, "grid max {fine:?}, midpoint {mid:?}");
    assert_eq!(spec.max_value(&c).unwrap(), spec.score(mid, &c).unwrap());
    assert!((spec.max_value(&c).unwrap() - (-8.0f64).exp()).abs() < 1e-15);
}

#[test]
fn single_anchor_under_conflicting_pair_is_near_zero() {
    let spec = spec(RewardKind::Conflicting);
    let c = Condition::pair(1, 2).unwrap();
    let a = spec.vocab.anchor(c.tokens()[0]).unwrap();
    assert!((spec.score(a, &c).unwrap() - (-16.0f64).exp()).abs() < 1e-18);
}

#[test]
fn gaussian_diversity_matches_closed_form() {
    // E|z - z'| for independent 2-D standard normals is sqrt(pi).
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut total = 0.0;
    for _ in 0..50 {
        let pts: Vec<[f64; 2]> = (0..64)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        total += batch_diversity(&pts).unwrap();
    }
    let mean = total / 50.0;
    let exact = std::f64::consts::PI.sqrt();
    assert!((mean - exact).abs() / exact <= 0.05, "mean diversity {mean}");
}

#[test]
fn diversity_trivial_cases() {
    assert_eq!(batch_diversity(&[[1.0, 2.0]; 5]).unwrap(), 0.0);
    assert_eq!(batch_diversity(&[[0.0, 0.0], [3.0, 4.0]]).unwrap(), 5.0);
    assert!(matches!(batch_diversity(&[[0.0, 0.0]]), Err(Error::TooFewSamples(1))));
}

#[test]
fn counter_counts_each_point_once() {
    let spec = spec(RewardKind::Proximity);
    let counter = RewardQueryCounter::new();
    let cs = conditions();
    counter.query(&spec, &[[0.0, 0.0]; 3], &cs).unwrap();
    counter.query(&spec, &[[1.0, 0.0]; 3], &cs).unwrap();
    assert_eq!(counter.count(), 6);
    assert!(counter.query(&spec, &[[0.0, 0.0]; 2], &cs).is_err());
}

fn untrained() -> (DenoiserParams, NoiseSchedule) {
    let vocab = ConditionVocabulary::new(8, RADIUS).unwrap();
    let config = ModelConfig {
        table_rows: vocab.table_rows(),
        embed_dim: 4,
        hidden: 16,
        second_token_weight: 0.25,
        input_scale: 300.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (DenoiserParams::init(config, &mut rng).unwrap(), NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap())
}

#[test]
fn evaluation_is_deterministic_and_matches_frozen_fixture() {
    let (params, sched) = untrained();
    let protocol = EvalProtocol {
        per_condition: 10,
        n_steps: 50,
        seed: 3,
    };
    let schedule = GuidanceSchedule::new(0.5, 5.0, 900, 5.0).unwrap();
    let spec = spec(RewardKind::Proximity);
    let a = evaluate(&params, &sched, &conditions(), schedule, &protocol, &spec).unwrap();
    let b = evaluate(&params, &sched, &conditions(), schedule, &protocol, &spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.points.len(), 30);
    assert_eq!(a.per_condition.len(), 3);
    // Frozen from the first run of this fixture.
    let frozen = FROZEN_UNTRAINED_REWARD;
    assert!((a.mean_reward - frozen).abs() <= 1e-9 * frozen.abs().max(1e-300), "mean reward {:?}", a.mean_reward);
}

const FROZEN_UNTRAINED_REWARD: f64 = 0.0005454675907907516;

#[test]
fn holdout_rejects_training_conditions() {
    let (params, sched) = untrained();
    let protocol = EvalProtocol {
        per_condition: 2,
        n_steps: 10,
        seed: 0,
    };
    let schedule = GuidanceSchedule::new(0.5, 5.0, 900, 5.0).unwrap();
    let spec = spec(RewardKind::Proximity);
    let train = conditions();
    let err = holdout_reward(&params, &sched, &train, &train[1..2], schedule, &protocol, &spec);
    assert!(matches!(err, Err(Error::Overlap(_))));
    let unseen = [Condition::pair(2, 3).unwrap()];
    let a = holdout_reward(&params, &sched, &train, &unseen, schedule, &protocol, &spec).unwrap();
    assert_eq!(a, holdout_reward(&params, &sched, &train, &unseen, schedule, &protocol, &spec).unwrap());
}

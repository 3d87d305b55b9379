use diffusion::{
    ancestral_sample, Condition, ConditionVocabulary, DenoiserParams, Guide, ModelConfig, NoiseSchedule, Reweight,
    SampleOptions, Slots, StepConstants, TimeBatch,
};
use guidance::{
    apply_reweights, cfg_predict, guidance_scale_at, reweight_condition, GuidanceContext, GuidanceSchedule, GuidedBatch,
    PromptWeighting,
};
use ndgrad::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Multiples of 1/8 in a small range: sums and products with dyadic scales stay exact.
fn dyadic() -> impl Strategy<Value = f64> {
    (-64i32..64).prop_map(|k| k as f64 / 8.0)
}

fn row(values: &[f64]) -> Tensor {
    Tensor::new(values.to_vec(), &[1, values.len()]).unwrap()
}

proptest! {
    #[test]
    fn cfg_is_affine_in_scale(c in prop::collection::vec(dyadic(), 2), u in prop::collection::vec(dyadic(), 2), w in dyadic()) {
        let (c, u) = (row(&c), row(&u));
        let out = cfg_predict(&c, &u, w).unwrap();
        let expect: Vec<f64> = c.data().iter().zip(u.data()).map(|(a, b)| b + w * (a - b)).collect();
        prop_assert_eq!(out.data(), &expect[..]);
        let zero = cfg_predict(&c, &u, 0.0).unwrap();
        let one = cfg_predict(&c, &u, 1.0).unwrap();
        prop_assert_eq!(zero.data(), u.data());
        prop_assert_eq!(one.data(), c.data());
        for i in 0..2 {
            prop_assert_eq!(out.data()[i] - zero.data()[i], w * (one.data()[i] - zero.data()[i]));
        }
    }

    #[test]
    fn reweighting_touches_exactly_one_row(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..3),
        null in prop::collection::vec(-1.0f64..1.0, 4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PromptWeighting::default();
        let (out, records) = reweight_condition(&rows, &null, &cfg, &mut rng).unwrap();
        prop_assert_eq!(records.len(), 1);
        let Reweight { index, weight } = records[0];
        prop_assert!((1.0..=1.2).contains(&weight));
        for (i, (a, b)) in rows.iter().zip(&out).enumerate() {
            if i != index {
                prop_assert_eq!(a, b);
            } else {
                let expect: Vec<f64> = a.iter().zip(&null).map(|(v, n)| n + weight * (v - n)).collect();
                prop_assert_eq!(b, &expect);
            }
        }
        prop_assert_eq!(apply_reweights(&rows, &null, &records).unwrap(), out);
    }

    #[test]
    fn null_rows_are_fixed_points(null in prop::collection::vec(-1.0f64..1.0, 3), w in 1.0f64..1.2) {
        let rows = vec![null.clone()];
        let out = apply_reweights(&rows, &null, &[Reweight { index: 0, weight: w }]).unwrap();
        prop_assert_eq!(out, rows);
    }

    #[test]
    fn equal_levels_match_constant_guidance(w in 0.0f64..8.0, switch_t in 0usize..=1000, t in 1usize..=1000) {
        let ctx = GuidanceContext {
            schedule: GuidanceSchedule { low: w, high: w, switch_t, eval_scale: w },
            prompt: PromptWeighting::default(),
            scheduling: true,
            exploration_active: true,
        };
        prop_assert_eq!(guidance_scale_at(&ctx, t), w);
    }
}

fn schedule() -> GuidanceSchedule {
    GuidanceSchedule::new(0.5, 5.0, 900, 5.0).unwrap()
}

fn exploring() -> GuidanceContext {
    GuidanceContext {
        schedule: schedule(),
        prompt: PromptWeighting::default(),
        scheduling: true,
        exploration_active: true,
    }
}

#[test]
fn full_resolution_chain_has_one_hundred_low_steps() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let steps = sched.sampling_steps(1000).unwrap();
    assert_eq!(steps.len(), 1000);
    let ctx = exploring();
    let low = steps.iter().filter(|s| guidance_scale_at(&ctx, s.t) == 0.5).count();
    assert_eq!(low, 100);
    let at_switch = steps.iter().find(|s| s.t == 900).unwrap();
    assert_eq!(guidance_scale_at(&ctx, at_switch.t), 5.0);
    // Strided: the count is the number of visited steps above the switch.
    let strided = sched.sampling_steps(50).unwrap();
    let above = strided.iter().filter(|s| s.t > 900).count();
    assert_eq!(strided.iter().filter(|s| guidance_scale_at(&ctx, s.t) == 0.5).count(), above);
    assert_eq!(above, 5);
}

fn tiny() -> (DenoiserParams, NoiseSchedule) {
    let vocab = ConditionVocabulary::new(4, 2.0).unwrap();
    let config = ModelConfig {
        table_rows: vocab.table_rows(),
        embed_dim: 3,
        hidden: 8,
        second_token_weight: 0.25,
        input_scale: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (DenoiserParams::init(config, &mut rng).unwrap(), NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap())
}

/// Reference sampler guide: constant scale on untouched condition rows.
struct ConstantCfg {
    conditions: Vec<Condition>,
    slots: Slots,
    scale: f64,
}

impl Guide for ConstantCfg {
    fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    fn eps(&self, params: &DenoiserParams, x: &Tensor, time: &TimeBatch, _: &StepConstants) -> diffusion::Result<(Tensor, f64)> {
        let p = params.predict(x, time, &self.slots)?;
        let w = self.scale;
        Ok((p.uncond.add(&p.cond.sub(&p.uncond)?.scale(w))?, w))
    }
}

fn conditions() -> Vec<Condition> {
    vec![Condition::pair(1, 2).unwrap(), Condition::single(3), Condition::pair(4, 1).unwrap()]
}

#[test]
fn exploration_off_is_plain_constant_guidance() {
    let (params, sched) = tiny();
    let conds = conditions();
    let reference = ConstantCfg {
        conditions: conds.clone(),
        slots: params.token_slots(&conds).unwrap(),
        scale: 5.0,
    };
    let off = GuidanceContext {
        exploration_active: false,
        ..exploring()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let guided = GuidedBatch::new(&params, conds.clone(), off, &mut rng).unwrap();
    assert!(guided.reweights().iter().all(Vec::is_empty));
    let streams = [0, 1, 2];
    let a = ancestral_sample(&params, &sched, 20, &reference, 7, &streams, SampleOptions::default()).unwrap();
    let b = ancestral_sample(&params, &sched, 20, &guided, 7, &streams, SampleOptions::default()).unwrap();
    assert_eq!(a.trajectories, b.trajectories);
}

#[test]
fn unit_scale_without_exploration_is_conditional_prediction() {
    let (params, sched) = tiny();
    let conds = conditions();
    let ctx = GuidanceContext::evaluation(GuidanceSchedule::new(0.5, 5.0, 900, 1.0).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let guided = GuidedBatch::new(&params, conds.clone(), ctx, &mut rng).unwrap();
    let plain = diffusion::ConditionalGuide::new(&params, conds).unwrap();
    let a = ancestral_sample(&params, &sched, 20, &plain, 3, &[5, 6, 7], SampleOptions::default()).unwrap();
    let b = ancestral_sample(&params, &sched, 20, &guided, 3, &[5, 6, 7], SampleOptions::default()).unwrap();
    assert_eq!(a.trajectories, b.trajectories);
}

#[test]
fn logged_emphasis_replays_the_trajectory() {
    let (params, sched) = tiny();
    let conds = conditions();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let guided = GuidedBatch::new(&params, conds.clone(), exploring(), &mut rng).unwrap();
    let first = ancestral_sample(&params, &sched, 25, &guided, 9, &[3, 4, 5], SampleOptions::default()).unwrap();
    let records: Vec<_> = first.trajectories.iter().map(|t| t.reweights.clone()).collect();
    assert!(records.iter().all(|r| r.len() == 1));
    let replay = GuidedBatch::replay(&params, conds, records, exploring()).unwrap();
    let second = ancestral_sample(&params, &sched, 25, &replay, 9, &[3, 4, 5], SampleOptions::default()).unwrap();
    assert_eq!(first.trajectories, second.trajectories);
    let low: Vec<usize> = first.trajectories[0].steps.iter().filter(|s| s.scale == 0.5).map(|s| s.t).collect();
    assert!(low.iter().all(|&t| t > 900) && !low.is_empty());
}

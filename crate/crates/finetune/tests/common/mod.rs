#![allow(dead_code)]

use diffusion::{Condition, ConditionVocabulary, DenoiserParams, ModelConfig, NoiseSchedule, ParamGroup};
use guidance::{GuidanceContext, GuidanceSchedule, PromptWeighting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rewards::{RewardKind, RewardSpec};

pub fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

pub fn vocab() -> ConditionVocabulary {
    ConditionVocabulary::new(4, 40.0).unwrap()
}

pub fn spec(kind: RewardKind) -> RewardSpec {
    RewardSpec::new(kind, 30.0, vocab()).unwrap()
}

pub fn train_conditions() -> Vec<Condition> {
    vec![Condition::pair(1, 2).unwrap(), Condition::pair(3, 4).unwrap()]
}

pub fn unseen_conditions() -> Vec<Condition> {
    vec![Condition::pair(2, 3).unwrap()]
}

/// Untrained samples spread over tens of units, so anchors and length
/// scale are sized to keep rewards away from underflow.
///
/// Small untrained network with rank-2 adapters whose `up` factors are
/// non-zero, so every adapter entry influences the output.
pub fn tiny_params(seed: u64) -> DenoiserParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        table_rows: vocab().table_rows(),
        embed_dim: 3,
        hidden: 6,
        second_token_weight: 0.25,
        input_scale: 1.0,
    };
    let mut p = DenoiserParams::init(config, &mut rng).unwrap();
    p.attach_adapters(2, &mut rng).unwrap();
    let values: Vec<Vec<f64>> = p
        .values(ParamGroup::Adapter)
        .into_iter()
        .map(|b| b.iter().map(|_| rng.gen_range(-0.3..0.3)).collect())
        .collect();
    p.set_values(ParamGroup::Adapter, values).unwrap();
    p
}

pub fn context(exploring: bool) -> GuidanceContext {
    GuidanceContext {
        schedule: GuidanceSchedule::new(0.5, 2.0, 600, 1.5).unwrap(),
        prompt: PromptWeighting::default(),
        scheduling: true,
        exploration_active: exploring,
    }
}

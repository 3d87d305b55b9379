mod common;

use common::*;
use diffusion::{DenoiserParams, ParamGroup};
use finetune::{collect_batch, finetune, CollectRequest, FineTuneConfig, Method, RunLogRow, RunSetup};
use guidance::GuidanceContext;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rewards::{evaluate, EvalProtocol, RewardKind, RewardQueryCounter, RewardSpec};

fn small_cfg(method: Method) -> FineTuneConfig {
    FineTuneConfig {
        iterations: 6,
        batch: 8,
        steps: 10,
        eval_every: 2,
        eval_n: 3,
        adapter_rank: 2,
        ..FineTuneConfig::for_method(method)
    }
}

fn run(
    params: &mut DenoiserParams,
    cfg: &FineTuneConfig,
    guidance: GuidanceContext,
    reward: &RewardSpec,
    seed: u64,
) -> Vec<RunLogRow> {
    let s = sched();
    let (train, unseen) = (train_conditions(), unseen_conditions());
    let cross = spec(RewardKind::Proximity);
    let setup = RunSetup {
        sched: &s,
        train: &train,
        unseen: &unseen,
        reward,
        cross_reward: Some(&cross),
        guidance,
        eval: EvalProtocol {
            per_condition: 0,
            n_steps: 10,
            seed: 99,
        },
        seed,
        wall_clock: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    finetune(params, cfg, &setup, &mut rng, &mut |_, _| Ok(())).unwrap().log
}

#[test]
fn runlog_ticks_and_query_accounting() {
    for method in [Method::Ddpo, Method::Backprop] {
        let cfg = small_cfg(method);
        let mut params = tiny_params(3);
        let log = run(&mut params, &cfg, context(true), &spec(RewardKind::Conflicting), 1);
        let iterations: Vec<usize> = log.iter().map(|r| r.iteration).collect();
        assert_eq!(iterations, vec![0, 2, 4, 6]);
        for pair in log.windows(2) {
            assert_eq!(pair[1].reward_queries, pair[0].reward_queries + (cfg.eval_every * cfg.batch) as u64);
        }
        assert_eq!(log[0].reward_queries, 0);
        assert!(log[0].mean_train_reward.is_nan());
        assert!(log[1..].iter().all(|r| r.mean_train_reward.is_finite()));
        assert!(log.iter().all(|r| r.wall_ms == 0 && r.diversity > 0.0 && r.cross_reward.is_finite()));
    }
}

#[test]
fn final_partial_interval_still_logged() {
    let cfg = FineTuneConfig {
        iterations: 5,
        ..small_cfg(Method::Ddpo)
    };
    let mut params = tiny_params(3);
    let log = run(&mut params, &cfg, context(true), &spec(RewardKind::Conflicting), 1);
    assert_eq!(log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
    assert_eq!(log[3].reward_queries, 5 * 8);
}

#[test]
fn first_evaluation_matches_pretrained_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut base = tiny_params(3);
    base.adapters.iter_mut().for_each(|a| *a = None);
    let s = sched();
    let reward = spec(RewardKind::Conflicting);
    let protocol = EvalProtocol {
        per_condition: 3,
        n_steps: 10,
        seed: 99,
    };
    let pretrained = evaluate(&base, &s, &train_conditions(), context(false).schedule, &protocol, &reward).unwrap();
    let mut params = base.clone();
    params.attach_adapters(2, &mut rng).unwrap();
    let log = run(&mut params, &small_cfg(Method::Ddpo), context(true), &reward, 4);
    assert_eq!(log[0].eval_seen_reward, pretrained.mean_reward);
    assert_eq!(log[0].diversity, pretrained.diversity);
}

#[test]
fn base_weights_are_frozen() {
    for method in [Method::Ddpo, Method::Backprop] {
        let mut params = tiny_params(5);
        let before = params.values(ParamGroup::Base);
        let adapters = params.values(ParamGroup::Adapter);
        run(&mut params, &small_cfg(method), context(true), &spec(RewardKind::Conflicting), 2);
        assert_eq!(params.values(ParamGroup::Base), before);
        assert_ne!(params.values(ParamGroup::Adapter), adapters);
    }
}

#[test]
fn fixed_seed_reproduces_run() {
    let cfg = small_cfg(Method::Ddpo);
    let (mut a, mut b) = (tiny_params(6), tiny_params(6));
    let la = run(&mut a, &cfg, context(true), &spec(RewardKind::Conflicting), 7);
    let lb = run(&mut b, &cfg, context(true), &spec(RewardKind::Conflicting), 7);
    assert_eq!(format!("{la:?}"), format!("{lb:?}"));
    assert_eq!(a.values(ParamGroup::Adapter), b.values(ParamGroup::Adapter));
}

#[test]
fn disabled_modules_reduce_to_plain_baseline() {
    // No exploration window and both modules switched off take the same path.
    let never = FineTuneConfig {
        explore_fraction: 0.0,
        ..small_cfg(Method::Ddpo)
    };
    let mut off = context(true);
    off.scheduling = false;
    off.prompt.enabled = false;
    let (mut a, mut b) = (tiny_params(8), tiny_params(8));
    let la = run(&mut a, &never, context(true), &spec(RewardKind::Conflicting), 3);
    let lb = run(&mut b, &small_cfg(Method::Ddpo), off, &spec(RewardKind::Conflicting), 3);
    assert_eq!(format!("{la:?}"), format!("{lb:?}"));
}

#[test]
fn adapter_rank_mismatch_rejected() {
    let mut params = tiny_params(3);
    let cfg = FineTuneConfig {
        adapter_rank: 3,
        ..small_cfg(Method::Ddpo)
    };
    let s = sched();
    let (train, reward) = (train_conditions(), spec(RewardKind::Conflicting));
    let setup = RunSetup {
        sched: &s,
        train: &train,
        unseen: &[],
        reward: &reward,
        cross_reward: None,
        guidance: context(true),
        eval: EvalProtocol {
            per_condition: 0,
            n_steps: 10,
            seed: 0,
        },
        seed: 0,
        wall_clock: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(finetune(&mut params, &cfg, &setup, &mut rng, &mut |_, _| Ok(())).is_err());
}

fn collected_context(cfg: &FineTuneConfig, iteration: usize) -> (bool, bool) {
    let s = sched();
    let train = train_conditions();
    let req = CollectRequest {
        sched: &s,
        conditions: &train,
        context: GuidanceContext {
            exploration_active: cfg.exploration_active(iteration),
            ..context(true)
        },
        batch: 4,
        n_steps: 10,
        seed: 0,
        first_stream: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(iteration as u64);
    let params = tiny_params(1);
    let batch = collect_batch(&params, &req, &spec(RewardKind::Conflicting), &RewardQueryCounter::new(), &mut rng).unwrap();
    let eval = req.context.schedule.eval_scale;
    let constant = batch.trajectories.iter().all(|t| t.steps.iter().all(|s| s.scale == eval));
    let plain = batch.trajectories.iter().all(|t| t.reweights.is_empty());
    (constant, plain)
}

#[test]
fn exploration_stops_at_three_quarters() {
    let cfg = FineTuneConfig {
        iterations: 10,
        ..FineTuneConfig::ddpo()
    };
    // ceil(0.75 * 10) = 8.
    assert_eq!(collected_context(&cfg, 7), (false, false));
    assert_eq!(collected_context(&cfg, 8), (true, true));
    assert_eq!(collected_context(&cfg, 9), (true, true));
    let none = FineTuneConfig {
        explore_fraction: 0.0,
        ..cfg
    };
    assert_eq!(collected_context(&none, 0), (true, true));
}

proptest! {
    #[test]
    fn exploration_window_is_a_prefix(total in 1usize..400, num in 0u32..=100) {
        let cfg = FineTuneConfig { iterations: total, explore_fraction: num as f64 / 100.0, ..FineTuneConfig::ddpo() };
        let boundary = (num as usize * total).div_ceil(100);
        for it in 0..total {
            prop_assert_eq!(cfg.exploration_active(it), it < boundary, "it {} boundary {}", it, boundary);
        }
    }
}

#[test]
fn config_validation() {
    let bad = [
        FineTuneConfig { explore_fraction: 1.5, ..FineTuneConfig::ddpo() },
        FineTuneConfig { clip: 0.0, ..FineTuneConfig::ddpo() },
        FineTuneConfig { trunc_k: Some(0), ..FineTuneConfig::backprop() },
        FineTuneConfig { eval_every: 0, ..FineTuneConfig::ddpo() },
    ];
    assert!(bad.iter().all(|c| c.validate().is_err()));
    assert!(FineTuneConfig::ddpo().validate().is_ok());
    assert_eq!("backprop".parse::<Method>().unwrap(), Method::Backprop);
    assert!("ppo".parse::<Method>().is_err());
}

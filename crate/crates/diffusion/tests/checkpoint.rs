use diffusion::{Checkpoint, CheckpointError, ConditionVocabulary, DenoiserParams, ModelConfig, ParamGroup};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(seed: u64, hidden: usize, rank: Option<usize>, special: bool) -> DenoiserParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        table_rows: ConditionVocabulary::new(5, 3.0).unwrap().table_rows(),
        embed_dim: 3,
        hidden,
        second_token_weight: 0.25,
        input_scale: rng.gen_range(0.1..500.0),
    };
    let mut p = DenoiserParams::init(config, &mut rng).unwrap();
    if let Some(r) = rank {
        p.attach_adapters(r, &mut rng).unwrap();
        let v = p
            .values(ParamGroup::Adapter)
            .into_iter()
            .map(|b| b.iter().map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        p.set_values(ParamGroup::Adapter, v).unwrap();
    }
    if special {
        // Values whose bit patterns are easy to lose in a text round trip.
        let mut v = p.values(ParamGroup::Base);
        v[0][0] = -0.0;
        v[0][1] = f64::MIN_POSITIVE / 4.0;
        v[1][0] = 0.1 + 0.2;
        v[1][1] = f64::MAX;
        p.set_values(ParamGroup::Base, v).unwrap();
    }
    p
}

fn bits(p: &DenoiserParams) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    p.named_blocks()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_is_bit_exact(seed in any::<u64>(), hidden in 3usize..10, rank in prop::option::of(1usize..3), special in any::<bool>()) {
        let ckpt = Checkpoint { timesteps: 1000, params: params(seed, hidden, rank, special) };
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.timesteps, 1000);
        prop_assert_eq!(&back.params.config, &ckpt.params.config);
        prop_assert_eq!(bits(&back.params), bits(&ckpt.params));
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupted_bytes_never_panic(seed in any::<u64>(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6)) {
        let mut bytes = Checkpoint { timesteps: 50, params: params(seed, 4, Some(2), false) }.encode();
        for (i, b) in flips {
            let i = i.index(bytes.len());
            bytes[i] = b;
        }
        let _ = Checkpoint::decode(&bytes);
    }
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = Checkpoint {
        timesteps: 1000,
        params: params(1, 4, Some(2), false),
    }
    .encode();
    for len in 0..bytes.len() {
        assert!(Checkpoint::decode(&bytes[..len]).is_err(), "prefix of {len} bytes decoded");
    }
}

#[test]
fn structural_errors_are_reported() {
    let bytes = Checkpoint {
        timesteps: 1000,
        params: params(2, 4, None, false),
    }
    .encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(Checkpoint::decode(&bad).unwrap_err(), CheckpointError::BadMagic);
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert_eq!(Checkpoint::decode(&bad).unwrap_err(), CheckpointError::Version(9));
    let mut bad = bytes.clone();
    bad.push(0);
    assert_eq!(Checkpoint::decode(&bad).unwrap_err(), CheckpointError::Trailing(1));
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint {
        timesteps: 1000,
        params: params(3, 5, Some(1), true),
    };
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(bits(&back.params), bits(&ckpt.params));
    assert!(Checkpoint::load(dir.path().join("missing.ckpt")).is_err());
}

use std::sync::Arc;

use coda::augment::{augment_to_target, coda_batch, CodaConfig, GroundTruth};
use coda::dataset::Dataset;
use coda::envs::{
    collect_random, component_block_max, finite_difference_jacobian, mask_agreement, BouncingBall,
    BouncingBallConfig, Environment, MaskedDynamics, SyntheticMp, SyntheticMpConfig, TwoRoom,
    TwoRoomConfig,
};
use coda::par::Parallelism;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Share of decided mask entries that agree with finite-difference
/// sensitivities over states visited by a random policy.
fn agreement<E: Environment>(env: &E, h: f64, reset: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = collect_random(env, 1000, reset, None, &mut rng).unwrap();
    let (mut agree, mut decided) = (0, 0);
    for t in &data {
        let (s, a) = (t.s.values(), t.a.values());
        let (_, mask) = env.step(s, a).unwrap();
        let jac = finite_difference_jacobian(env, s, a, h).unwrap();
        let mags = component_block_max(env.space(), &jac);
        let (g, d) = mask_agreement(&mask, &mags, 1e-9, 1e-7);
        agree += g;
        decided += d;
    }
    agree as f64 / decided as f64
}

#[test]
fn bouncing_ball_masks_match_finite_differences() {
    let env = BouncingBall::new(BouncingBallConfig::default()).unwrap();
    let a = agreement(&env, 1e-6, 0.05, 10);
    assert!(a >= 0.99, "agreement {a}");
}

#[test]
fn synthetic_masks_match_finite_differences() {
    // iid states, the distribution mask learning trains on
    for cfg in [SyntheticMpConfig::default(), SyntheticMpConfig::nonstationary(1.5)] {
        let env = SyntheticMp::new(cfg).unwrap();
        let a = agreement(&env, 1e-5, 1.0, 11);
        assert!(a >= 0.99, "agreement {a}");
    }
}

#[test]
fn two_room_masks_match_finite_differences() {
    let env = TwoRoom::new(TwoRoomConfig::default()).unwrap();
    let a = agreement(&env, 1e-6, 0.05, 12);
    assert!(a >= 0.99, "agreement {a}");
}

#[test]
fn ground_truth_acceptance_on_random_pairs() {
    let env = Arc::new(BouncingBall::new(BouncingBallConfig::default()).unwrap());
    let buffer = collect_random(env.as_ref(), 2000, 0.05, None, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let provider = GroundTruth::new(env.clone() as Arc<dyn MaskedDynamics>);
    let cfg = CodaConfig {
        relabel_reward: false,
        pairs_per_round: 2000,
        max_samples_per_pair: 1,
        seed: 13,
        ..Default::default()
    };
    let batch = coda_batch(&buffer, &provider, None, &cfg, Parallelism::Sequential).unwrap();
    let rate = batch.stats.acceptance_rate();
    assert!(rate >= 0.5, "acceptance {rate}");
}

#[test]
fn augmentation_is_identical_across_execution_modes() {
    let env = Arc::new(BouncingBall::new(BouncingBallConfig::default()).unwrap());
    let buffer = collect_random(env.as_ref(), 300, 0.05, None, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let provider = GroundTruth::new(env.clone() as Arc<dyn MaskedDynamics>);
    let cfg = CodaConfig {
        relabel_reward: false,
        seed: 14,
        ..Default::default()
    };
    let run = |par| augment_to_target(&buffer, &provider, None, &cfg, 2000, 20, par).unwrap();
    let (a, b) = (run(Parallelism::Sequential), run(Parallelism::default()));
    assert_eq!(a.samples, b.samples);
}

#[test]
fn augmented_batch_survives_a_dataset_round_trip() {
    let env = Arc::new(BouncingBall::new(BouncingBallConfig::default()).unwrap());
    let buffer = collect_random(env.as_ref(), 200, 0.05, None, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let provider = GroundTruth::new(env.clone() as Arc<dyn MaskedDynamics>);
    let cfg = CodaConfig {
        relabel_reward: false,
        ..Default::default()
    };
    let batch = augment_to_target(&buffer, &provider, None, &cfg, 500, 20, Parallelism::Sequential).unwrap();
    let mut all = buffer;
    all.extend(batch.samples);
    let ds = Dataset::new(env.space().clone(), all).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aug.coda");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.transitions, ds.transitions);
}

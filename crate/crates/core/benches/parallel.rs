//! Sequential versus rayon execution of the parallel hot paths.

use std::sync::Arc;

use coda::augment::{coda_batch, CodaConfig, GroundTruth};
use coda::envs::{collect_random, BouncingBall, BouncingBallConfig, MaskedDynamics};
use coda::nn::{shard_range, sharded_loss_and_grads};
use coda::par::Parallelism;
use coda::sandy::{FlatData, MixtureConfig, ModelSpec, Normalizer, Penalties, SandyModel};
use coda::scm::{run_campaign, CampaignConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("rayon", Parallelism::Rayon),
];

fn bench_coda(c: &mut Criterion) {
    let env = Arc::new(BouncingBall::new(BouncingBallConfig::default()).unwrap());
    let buffer = collect_random(env.as_ref(), 2000, 0.05, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let provider = GroundTruth::new(env.clone() as Arc<dyn MaskedDynamics>);
    let cfg = CodaConfig {
        relabel_reward: false,
        ..Default::default()
    };
    let mut group = c.benchmark_group("coda_batch");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| coda_batch(&buffer, &provider, None, &cfg, par).unwrap())
        });
    }
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    const SHARDS: usize = 4;
    let env = BouncingBall::new(BouncingBallConfig::default()).unwrap();
    let data = collect_random(&env, 512, 0.05, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let flat = FlatData::from_transitions(env.space(), &data).unwrap();
    let norm = Normalizer::fit(&flat);
    let flat = norm.apply(&flat);
    let model = SandyModel::new(
        ModelSpec::Mixture(MixtureConfig::default()),
        env.space().clone(),
        norm,
        0,
    )
    .unwrap();
    let shards: Vec<_> = (0..SHARDS)
        .map(|k| {
            let (lo, hi) = shard_range(flat.len(), SHARDS, k);
            flat.gather(&(lo..hi).collect::<Vec<_>>())
        })
        .collect();
    let pen = Penalties {
        lambda1: 1e-4,
        lambda2: 1e-3,
        lambda3: 0.0,
    };
    let mut group = c.benchmark_group("mixture_gradient_512");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                sharded_loss_and_grads(&model.params, SHARDS, par, |tape, vars, k| {
                    let (x, y) = &shards[k];
                    Ok(model.data_loss(tape, vars, x, y, flat.len(), &pen)?.0)
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_campaign(c: &mut Criterion) {
    let cfg = CampaignConfig {
        instances: 100,
        ..Default::default()
    };
    let mut group = c.benchmark_group("scm_campaign_100");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_campaign(&cfg, par).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_coda, bench_gradient, bench_campaign
}
criterion_main!(benches);

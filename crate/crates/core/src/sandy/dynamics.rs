//! Plain MLP dynamics models, autoregressive rollouts and the comparison
//! of training on real data alone against training with counterfactual
//! samples.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{FlatData, Normalizer};
use super::train::EpochRecord;
use super::SandyModel;
use crate::augment::{augment_to_target, CodaConfig, CodaStats, GroundTruth, Identity, MaskProvider};
use crate::envs::{collect_random, BouncingBall, BouncingBallConfig, Environment, MaskedDynamics};
use crate::nn::{shard_range, sharded_loss_and_grads, Activation, Adam, AdamConfig, Mlp, ParamSet, Tape, Tensor};
use crate::par::{self, Parallelism};
use crate::{Error, FactoredSpace, Result, Transition};

pub trait DynamicsModel: Send + Sync {
    fn space(&self) -> &Arc<FactoredSpace>;

    fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>>;
}

impl DynamicsModel for SandyModel {
    fn space(&self) -> &Arc<FactoredSpace> {
        SandyModel::space(self)
    }

    fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        SandyModel::predict(self, s, a)
    }
}

/// An MLP predicting the standardized state change `s' - s`.
#[derive(Clone, Debug)]
pub struct DynamicsMlp {
    pub mlp: Mlp,
    pub params: ParamSet,
    pub norm: Normalizer,
    space: Arc<FactoredSpace>,
}

/// `(s ++ a, s' - s)` rows.
fn delta_data(space: &FactoredSpace, ts: &[Transition]) -> Result<FlatData> {
    let mut d = FlatData::from_transitions(space, ts)?;
    let (in_dim, out_dim) = (d.in_dim, d.out_dim);
    for (y, x) in d.y.chunks_mut(out_dim).zip(d.x.chunks(in_dim)) {
        y.iter_mut().zip(x).for_each(|(t, s)| *t -= s);
    }
    Ok(d)
}

impl DynamicsMlp {
    pub fn new(space: Arc<FactoredSpace>, hidden: &[usize], norm: Normalizer, seed: u64) -> Result<Self> {
        let mut dims = vec![space.state_len() + space.action_len()];
        dims.extend(hidden);
        dims.push(space.state_len());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&mut params, "dyn", &dims, Activation::Relu, Activation::Identity, &mut rng)?;
        Ok(DynamicsMlp {
            mlp,
            params,
            norm,
            space,
        })
    }

    /// Standardization fitted to `ts` in delta form.
    pub fn fit_normalizer(space: &FactoredSpace, ts: &[Transition]) -> Result<Normalizer> {
        Ok(Normalizer::fit(&delta_data(space, ts)?))
    }
}

impl DynamicsModel for DynamicsMlp {
    fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.space.check_state(s)?;
        self.space.check_action(a)?;
        let mut x: Vec<f64> = s.iter().chain(a).copied().collect();
        self.norm.normalize_x(&mut x);
        let n = x.len();
        let mut y = self.mlp.eval(&self.params, &Tensor::new(vec![1, n], x)?)?.into_data();
        self.norm.denormalize_y(&mut y);
        y.iter_mut().zip(s).for_each(|(d, v)| *d += v);
        Ok(y)
    }
}

/// `[s0, s1, ..., sT]` with `s_{t+1} = model(s_t, actions[t])`.
pub fn dyn_rollout(model: &dyn DynamicsModel, s0: &[f64], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    model.space().check_state(s0)?;
    let mut traj = vec![s0.to_vec()];
    for (t, a) in actions.iter().enumerate() {
        let next = model.predict(traj.last().expect("nonempty"), a)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRollout(t + 1));
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Per-step L2 distance between model and environment rollouts from the
/// same start and actions, plus the steps at which the environment
/// coupled two or more state components.
pub fn rollout_divergence(
    model: &dyn DynamicsModel,
    env: &dyn MaskedDynamics,
    s0: &[f64],
    actions: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<usize>)> {
    let predicted = dyn_rollout(model, s0, actions)?;
    let mut truth = s0.to_vec();
    let mut errors = Vec::with_capacity(actions.len());
    let mut coupled_steps = Vec::new();
    let n = env.space().n_state();
    for (t, a) in actions.iter().enumerate() {
        let (next, mask) = env.step(&truth, a)?;
        let cross = (0..n).any(|i| (0..n).any(|j| i != j && mask.get(i, j)));
        if cross {
            coupled_steps.push(t + 1);
        }
        truth = next;
        let p = &predicted[t + 1];
        errors.push(p.iter().zip(&truth).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
    }
    Ok((errors, coupled_steps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynTrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gradient steps per epoch, independent of the training-set size so
    /// that every arm gets the same compute.
    pub steps_per_epoch: usize,
    pub shards: usize,
}

impl Default for DynTrainConfig {
    fn default() -> Self {
        DynTrainConfig {
            hidden: vec![128, 128],
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            steps_per_epoch: 100,
            shards: 4,
        }
    }
}

/// Minibatch Adam on a fixed normalizer; returns the final model and the
/// per-epoch curve (MSE per standardized delta coordinate).
pub fn train_dynamics(
    space: Arc<FactoredSpace>,
    norm: &Normalizer,
    train: &[Transition],
    val: &[Transition],
    config: &DynTrainConfig,
    seed: u64,
    par: Parallelism,
) -> Result<(DynamicsMlp, Vec<EpochRecord>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("dynamics training or validation set"));
    }
    if config.batch_size == 0 || config.shards == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidConfig("dynamics lr, batch_size and shards must be positive".into()));
    }
    let train_data = norm.apply(&delta_data(&space, train)?);
    let val_data = norm.apply(&delta_data(&space, val)?);
    let mut model = DynamicsMlp::new(space, &config.hidden, norm.clone(), seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.params,
    );
    let mut curve = Vec::with_capacity(config.epochs);
    let b = config.batch_size;
    let shards = config.shards;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut sse_total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..train_data.len())).collect();
            let (x, y) = train_data.gather(&idx);
            let sse_parts: Vec<Mutex<f64>> = (0..shards).map(|_| Mutex::new(0.0)).collect();
            let mlp = &model.mlp;
            let (loss, grads) = sharded_loss_and_grads(&model.params, shards, par, |tape: &mut Tape, vars, shard| {
                let (lo, hi) = shard_range(b, shards, shard);
                let xs = Tensor::new(vec![hi - lo, x.last_dim()], x.data()[lo * x.last_dim()..hi * x.last_dim()].to_vec())?;
                let ys = Tensor::new(vec![hi - lo, y.last_dim()], y.data()[lo * y.last_dim()..hi * y.last_dim()].to_vec())?;
                let xv = tape.constant(xs);
                let yv = tape.constant(ys);
                let pred = mlp.forward(tape, vars, xv)?;
                let diff = tape.sub(pred, yv)?;
                let sq = tape.square(diff);
                let sse = tape.sum(sq);
                *sse_parts[shard].lock().expect("poisoned") = tape.value(sse).item()?;
                Ok(tape.scale(sse, 1.0 / b as f64))
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sse_total += sse_parts.into_iter().map(|m| m.into_inner().expect("poisoned")).sum::<f64>();
            adam.step(&mut model.params, &grads)?;
        }
        let train_mse = sse_total / (config.steps_per_epoch * b * train_data.out_dim) as f64;
        let val_mse = mlp_mse(&model, &val_data, par)?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_mse });
        }
        curve.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
    }
    Ok((model, curve))
}

fn mlp_mse(model: &DynamicsMlp, data: &FlatData, par: Parallelism) -> Result<f64> {
    const CHUNK: usize = 1024;
    let n = data.len();
    let parts = par::try_map_indexed(par, n.div_ceil(CHUNK), |c| {
        let idx: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
        let (x, y) = data.gather(&idx);
        let pred = model.mlp.eval(&model.params, &x)?;
        Ok(pred.data().iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>())
    })?;
    Ok(par::tree_reduce(parts, |a, b| a + b).unwrap_or(0.0) / (n * data.out_dim) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynExperimentConfig {
    pub env: BouncingBallConfig,
    pub base_size: usize,
    pub coda_target: usize,
    pub val_size: usize,
    pub reset_prob: f64,
    pub coda: CodaConfig,
    pub max_rounds: usize,
    pub train: DynTrainConfig,
    pub seed: u64,
}

impl Default for DynExperimentConfig {
    fn default() -> Self {
        DynExperimentConfig {
            // The action's effect on the controlled sprite must be visible
            // next to wall and collision events for mask errors to matter.
            env: BouncingBallConfig {
                action_gain: 0.03,
                ..Default::default()
            },
            base_size: 2000,
            coda_target: 35_000,
            val_size: 5000,
            reset_prob: 0.05,
            coda: CodaConfig {
                relabel_reward: false,
                ..Default::default()
            },
            max_rounds: 200,
            train: DynTrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub train_size: usize,
    pub curve: Vec<EpochRecord>,
    pub final_val_mse: f64,
    pub min_val_mse: f64,
    pub coda_stats: Option<CodaStats>,
}

impl ArmReport {
    fn new(name: &str, train_size: usize, curve: Vec<EpochRecord>, coda_stats: Option<CodaStats>) -> Self {
        let final_val_mse = curve.last().map_or(f64::NAN, |r| r.val_mse);
        let min_val_mse = curve.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
        ArmReport {
            name: name.into(),
            train_size,
            curve,
            final_val_mse,
            min_val_mse,
            coda_stats,
        }
    }

    /// `final / min - 1`.
    pub fn overfit_ratio(&self) -> f64 {
        self.final_val_mse / self.min_val_mse - 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynExperimentReport {
    pub seed: u64,
    pub baseline: ArmReport,
    pub identity_coda: ArmReport,
    pub ground_truth_coda: ArmReport,
    /// Either CoDA arm produced fewer unique samples than requested.
    pub coda_shortfall: bool,
}

impl DynExperimentReport {
    /// Ground-truth CoDA < identity CoDA < baseline in final validation MSE.
    pub fn ordering_holds(&self) -> bool {
        self.ground_truth_coda.final_val_mse < self.identity_coda.final_val_mse
            && self.identity_coda.final_val_mse < self.baseline.final_val_mse
    }
}

/// Trains the same dynamics model on the base buffer alone, with
/// identity-mask counterfactuals and with ground-truth-mask
/// counterfactuals, validating all three on fresh real transitions under
/// one shared normalizer.
pub fn coda_dynamics_experiment(config: &DynExperimentConfig, par: Parallelism) -> Result<DynExperimentReport> {
    let env = Arc::new(BouncingBall::new(config.env.clone())?);
    let space = env.space().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = collect_random(env.as_ref(), config.base_size, config.reset_prob, None, &mut rng)?;
    rng.set_stream(1);
    let val = collect_random(env.as_ref(), config.val_size, config.reset_prob, None, &mut rng)?;
    let norm = DynamicsMlp::fit_normalizer(&space, &base)?;
    let coda_cfg = CodaConfig {
        seed: config.seed,
        ..config.coda.clone()
    };
    let augment = |provider: &dyn MaskProvider| {
        augment_to_target(&base, provider, None, &coda_cfg, config.coda_target, config.max_rounds, par)
    };
    let identity = augment(&Identity::new(space.clone()))?;
    let truth = augment(&GroundTruth::new(env.clone() as Arc<dyn MaskedDynamics>))?;
    let coda_shortfall = identity.samples.len() < config.coda_target || truth.samples.len() < config.coda_target;
    if coda_shortfall {
        log::warn!(
            "CoDA produced {} identity and {} ground-truth samples of {} requested",
            identity.samples.len(),
            truth.samples.len(),
            config.coda_target
        );
    }
    let with = |extra: &[Transition]| -> Vec<Transition> { base.iter().chain(extra).cloned().collect() };
    let train_seed = config.seed.wrapping_add(1);
    let run = |train: &[Transition]| train_dynamics(space.clone(), &norm, train, &val, &config.train, train_seed, par);
    let (_, base_curve) = run(&base)?;
    let id_train = with(&identity.samples);
    let (_, id_curve) = run(&id_train)?;
    let gt_train = with(&truth.samples);
    let (_, gt_curve) = run(&gt_train)?;
    Ok(DynExperimentReport {
        seed: config.seed,
        baseline: ArmReport::new("baseline", base.len(), base_curve, None),
        identity_coda: ArmReport::new("identity-coda", id_train.len(), id_curve, Some(identity.stats)),
        ground_truth_coda: ArmReport::new("ground-truth-coda", gt_train.len(), gt_curve, Some(truth.stats)),
        coda_shortfall,
    })
}

/// Environment-independent random actions for rollouts.
pub fn random_actions(env: &dyn Environment, t: usize, rng: &mut dyn rand::RngCore) -> Vec<Vec<f64>> {
    (0..t).map(|_| env.random_action(rng)).collect()
}

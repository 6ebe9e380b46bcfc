use std::collections::HashSet;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FlatData, ModelSpec, Normalizer, Penalties, SandyModel};
use crate::nn::{shard_range, sharded_loss_and_grads, Adam, AdamConfig, Tensor};
use crate::par::{self, Parallelism};
use crate::{Error, FactoredSpace, Result, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandyTrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Threshold used when the trained model serves as a mask provider.
    pub tau_default: f64,
    /// Data shards per batch; fixes the gradient summation order.
    pub shards: usize,
    pub seed: u64,
}

impl Default for SandyTrainConfig {
    fn default() -> Self {
        SandyTrainConfig {
            lambda1: 1e-4,
            lambda2: 1e-3,
            lambda3: 0.0,
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            patience: 8,
            tau_default: 0.05,
            shards: 4,
            seed: 0,
        }
    }
}

impl SandyTrainConfig {
    pub fn penalties(&self) -> Penalties {
        Penalties {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda1, self.lambda2, self.lambda3];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.shards == 0 {
            return Err(Error::InvalidConfig(
                "lr, batch_size and shards must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error per normalized target coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

pub fn write_curve_csv<W: Write>(w: &mut W, curve: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_mse,val_mse")?;
    for r in curve {
        writeln!(w, "{},{},{}", r.epoch, r.train_mse, r.val_mse)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainedSandy {
    /// Parameters from the epoch with the lowest validation error.
    pub model: SandyModel,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Validation error of `model` on normalized data.
pub fn eval_mse(model: &SandyModel, data: &FlatData, par: Parallelism) -> Result<f64> {
    const CHUNK: usize = 512;
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let parts = par::try_map_indexed(par, n.div_ceil(CHUNK), |c| {
        let idx: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
        let (x, y) = data.gather(&idx);
        let pred = model.predict_normalized(&x)?;
        Ok(pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>())
    })?;
    let sse = par::tree_reduce(parts, |a, b| a + b).unwrap_or(0.0);
    Ok(sse / (n * data.out_dim) as f64)
}

fn check_disjoint(train: &[Transition], val: &[Transition]) -> Result<()> {
    let keys: HashSet<Vec<u64>> = train.iter().map(Transition::payload_key).collect();
    if val.iter().any(|t| keys.contains(&t.payload_key())) {
        return Err(Error::Precondition(
            "training and validation sets overlap".into(),
        ));
    }
    Ok(())
}

/// Fits a model with Adam on minibatches, keeping the parameters with the
/// best validation error and stopping after `patience` epochs without
/// improvement. Inputs and targets are standardized with training-set
/// moments.
pub fn train_sandy(
    spec: ModelSpec,
    space: Arc<FactoredSpace>,
    train: &[Transition],
    val: &[Transition],
    config: &SandyTrainConfig,
    par: Parallelism,
) -> Result<TrainedSandy> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    check_disjoint(train, val)?;
    let raw_train = FlatData::from_transitions(&space, train)?;
    let norm = Normalizer::fit(&raw_train);
    let train_data = norm.apply(&raw_train);
    let val_data = norm.apply(&FlatData::from_transitions(&space, val)?);
    let mut model = SandyModel::new(spec, space, norm, config.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.params,
    );
    let penalties = config.penalties();
    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let shards = config.shards;
    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sse_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let (x, y) = train_data.gather(batch);
            let sse_parts: Vec<Mutex<f64>> = (0..shards).map(|_| Mutex::new(0.0)).collect();
            let (loss, grads) = sharded_loss_and_grads(&model.params, shards + 1, par, |tape, vars, shard| {
                if shard == shards {
                    return Ok(match model.param_penalty(tape, vars, &penalties)? {
                        Some(p) => p,
                        None => tape.constant(Tensor::scalar(0.0)),
                    });
                }
                let (lo, hi) = shard_range(b, shards, shard);
                let (xs, ys) = rows(&x, &y, lo, hi);
                let (loss, sse) = model.data_loss(tape, vars, &xs, &ys, b, &penalties)?;
                *sse_parts[shard].lock().expect("poisoned") = tape.value(sse).item()?;
                Ok(loss)
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sse_total += sse_parts.into_iter().map(|m| m.into_inner().expect("poisoned")).sum::<f64>();
            adam.step(&mut model.params, &grads)?;
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        let val_mse = eval_mse(&model, &val_data, par)?;
        let train_mse = sse_total / (n * train_data.out_dim) as f64;
        curve.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        log::debug!("sandy epoch {epoch}: train {train_mse:.5} val {val_mse:.5}");
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: val_mse,
            });
        }
        if val_mse < best.0 {
            best = (val_mse, epoch, model.params.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    let (best_val_mse, best_epoch, params) = best;
    model.params = params;
    Ok(TrainedSandy {
        model,
        curve,
        best_epoch,
        best_val_mse,
    })
}

/// Rows `lo..hi` of a batch.
fn rows(x: &Tensor, y: &Tensor, lo: usize, hi: usize) -> (Tensor, Tensor) {
    let (dx, dy) = (x.last_dim(), y.last_dim());
    (
        Tensor::new(vec![hi - lo, dx], x.data()[lo * dx..hi * dx].to_vec()).expect("rows"),
        Tensor::new(vec![hi - lo, dy], y.data()[lo * dy..hi * dy].to_vec()).expect("rows"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{collect_random, MaskedDynamics, SyntheticMp, SyntheticMpConfig};
    use crate::nn::Activation;
    use crate::sandy::{MixtureConfig, TransformerConfig};

    fn mp_data(n: usize, seed: u64) -> (Arc<FactoredSpace>, Vec<Transition>) {
        let env = SyntheticMp::new(SyntheticMpConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = collect_random(&env, n, 1.0, None, &mut rng).unwrap();
        (env.space().clone(), ts)
    }

    fn tiny_mixture() -> ModelSpec {
        ModelSpec::Mixture(MixtureConfig {
            experts: 2,
            expert_hidden: vec![16],
            gate_hidden: 8,
            activation: Activation::Tanh,
        })
    }

    #[test]
    fn training_reduces_loss_and_is_thread_independent() {
        let (space, ts) = mp_data(600, 1);
        let cfg = SandyTrainConfig {
            max_epochs: 3,
            batch_size: 32,
            ..Default::default()
        };
        let a = train_sandy(tiny_mixture(), space.clone(), &ts[..500], &ts[500..], &cfg, Parallelism::Sequential).unwrap();
        let b = train_sandy(tiny_mixture(), space, &ts[..500], &ts[500..], &cfg, Parallelism::Rayon).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.curve[2].train_mse < a.curve[0].train_mse);
        assert!(a.best_val_mse <= a.curve[0].val_mse);
    }

    #[test]
    fn first_epoch_improves_on_initialization() {
        let (space, ts) = mp_data(700, 2);
        let spec = ModelSpec::Transformer(TransformerConfig {
            width: 8,
            hidden: 8,
            key_dim: 4,
            blocks: 2,
            activation: Activation::Relu,
        });
        let norm = Normalizer::fit(&FlatData::from_transitions(&space, &ts[..600]).unwrap());
        let init = SandyModel::new(spec.clone(), space.clone(), norm.clone(), 0).unwrap();
        let val = norm.apply(&FlatData::from_transitions(&space, &ts[600..]).unwrap());
        let before = eval_mse(&init, &val, Parallelism::Sequential).unwrap();
        let cfg = SandyTrainConfig {
            max_epochs: 1,
            batch_size: 32,
            ..Default::default()
        };
        let out = train_sandy(spec, space, &ts[..600], &ts[600..], &cfg, Parallelism::Sequential).unwrap();
        assert!(out.curve[0].val_mse < before);
    }

    #[test]
    fn preconditions() {
        let (space, ts) = mp_data(20, 3);
        let cfg = SandyTrainConfig::default();
        let seq = Parallelism::Sequential;
        assert!(matches!(train_sandy(tiny_mixture(), space.clone(), &[], &ts, &cfg, seq), Err(Error::Empty(_))));
        assert!(matches!(
            train_sandy(tiny_mixture(), space.clone(), &ts[..10], &ts[5..], &cfg, seq),
            Err(Error::Precondition(_))
        ));
        let bad = SandyTrainConfig {
            lambda1: -1.0,
            ..Default::default()
        };
        assert!(train_sandy(tiny_mixture(), space, &ts[..10], &ts[10..], &bad, seq).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (space, ts) = mp_data(200, 4);
        let cfg = SandyTrainConfig {
            lr: 1e200,
            max_epochs: 5,
            batch_size: 16,
            ..Default::default()
        };
        let out = train_sandy(tiny_mixture(), space, &ts[..150], &ts[150..], &cfg, Parallelism::Sequential);
        assert!(matches!(out, Err(Error::Diverged { .. })), "{out:?}");
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_curve_csv(
            &mut buf,
            &[EpochRecord {
                epoch: 1,
                train_mse: 0.5,
                val_mse: 0.25,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_mse,val_mse\n1,0.5,0.25\n");
    }
}

//! Learned local masks.
//!
//! A [`SandyModel`] is a next-state predictor whose structure yields a
//! score for every `(input node, output component)` pair: gate-weighted
//! Jacobian bounds for the mixture, products of attention matrices for the
//! transformer. Thresholding the scores gives a [`LocalMask`].

pub mod data;
pub mod dynamics;
pub mod mixture;
pub mod roc;
pub mod train;
pub mod transformer;

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::MaskProvider;
use crate::envs::component_block_max;
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::{ParamSet, Tape, Tensor, Var};
use crate::par::{self, Parallelism};
use crate::{Error, FactoredSpace, LocalMask, Result, Transition};

pub use data::{FlatData, Normalizer};
pub use dynamics::{
    coda_dynamics_experiment, dyn_rollout, DynExperimentConfig, DynExperimentReport, DynamicsMlp,
    DynamicsModel,
};
pub use mixture::{MixtureConfig, MixtureModel};
pub use roc::{roc_eval, roc_from_scores, RocPoint, RocResult};
pub use train::{train_sandy, EpochRecord, SandyTrainConfig, TrainedSandy};
pub use transformer::{TransformerConfig, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Mixture(MixtureConfig),
    Transformer(TransformerConfig),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Mixture(_) => "mixture",
            ModelSpec::Transformer(_) => "transformer",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Architecture {
    Mixture(MixtureModel),
    Transformer(TransformerModel),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    spec: ModelSpec,
    space: FactoredSpace,
    normalizer: Normalizer,
}

/// Loss weights of the mixture objective; the transformer uses the data
/// term only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    /// Weight of the mean expert Jacobian-bound L1 norm.
    pub lambda1: f64,
    /// Weight of the gate-logit RMS term.
    pub lambda2: f64,
    /// Weight of the parameter L2 norm.
    pub lambda3: f64,
}

#[derive(Clone, Debug)]
pub struct SandyModel {
    pub arch: Architecture,
    pub params: ParamSet,
    pub norm: Normalizer,
    spec: ModelSpec,
    space: Arc<FactoredSpace>,
}

impl SandyModel {
    pub fn new(spec: ModelSpec, space: Arc<FactoredSpace>, norm: Normalizer, seed: u64) -> Result<Self> {
        let (in_dim, out_dim) = (space.state_len() + space.action_len(), space.state_len());
        if norm.x_mean.len() != in_dim || norm.y_mean.len() != out_dim {
            return Err(Error::Dimension {
                what: "normalizer",
                expected: in_dim,
                got: norm.x_mean.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let arch = match &spec {
            ModelSpec::Mixture(cfg) => Architecture::Mixture(MixtureModel::new(
                &mut params,
                cfg.clone(),
                in_dim,
                out_dim,
                &mut rng,
            )?),
            ModelSpec::Transformer(cfg) => Architecture::Transformer(TransformerModel::new(
                &mut params,
                cfg.clone(),
                &space,
                &mut rng,
            )?),
        };
        Ok(SandyModel {
            arch,
            params,
            norm,
            spec,
            space,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    /// `(1/B) sum ||y - h(x)||^2` over normalized rows plus, for the
    /// mixture, `lambda2` times the per-row gate term. Rows are weighted by
    /// `1 / batch` so that shards add up to the batch objective.
    pub fn data_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &Tensor,
        y: &Tensor,
        batch: usize,
        penalties: &Penalties,
    ) -> Result<(Var, Var)> {
        let yv = tape.constant(y.clone());
        let (pred, extra) = match &self.arch {
            Architecture::Mixture(m) => {
                let xv = tape.constant(x.clone());
                let out = m.forward(tape, vars, xv)?;
                let extra = if penalties.lambda2 > 0.0 {
                    let r = m.gate_penalty_sum(tape, out.logits);
                    Some(tape.scale(r, penalties.lambda2))
                } else {
                    None
                };
                (out.pred, extra)
            }
            Architecture::Transformer(t) => (t.forward(tape, vars, x)?.pred, None),
        };
        let diff = tape.sub(pred, yv)?;
        let sq = tape.square(diff);
        let sse = tape.sum(sq);
        let mut loss = sse;
        if let Some(e) = extra {
            loss = tape.add(loss, e)?;
        }
        Ok((tape.scale(loss, 1.0 / batch as f64), sse))
    }

    /// Parameter-only terms: `lambda1 S + lambda3 ||theta||_2` for the
    /// mixture, `None` when both vanish or for the transformer.
    pub fn param_penalty(&self, tape: &mut Tape, vars: &[Var], penalties: &Penalties) -> Result<Option<Var>> {
        let Architecture::Mixture(m) = &self.arch else {
            return Ok(None);
        };
        let mut total = None;
        if penalties.lambda1 > 0.0 {
            let s = m.sparsity_penalty(tape, vars)?;
            total = Some(tape.scale(s, penalties.lambda1));
        }
        if penalties.lambda3 > 0.0 {
            let mut sq = None;
            for &v in vars {
                let s2 = tape.square(v);
                let s = tape.sum(s2);
                sq = Some(match sq {
                    None => s,
                    Some(acc) => tape.add(acc, s)?,
                });
            }
            if let Some(sq) = sq {
                let sq = tape.add_scalar(sq, 1e-12);
                let norm = tape.sqrt(sq);
                let term = tape.scale(norm, penalties.lambda3);
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
        }
        Ok(total)
    }

    /// The whole objective on one batch, on a single tape.
    pub fn full_loss(&self, tape: &mut Tape, vars: &[Var], x: &Tensor, y: &Tensor, penalties: &Penalties) -> Result<Var> {
        let (data, _) = self.data_loss(tape, vars, x, y, x.rows(), penalties)?;
        match self.param_penalty(tape, vars, penalties)? {
            Some(p) => tape.add(data, p),
            None => Ok(data),
        }
    }

    fn normalized_rows(&self, rows: &[(&[f64], &[f64])]) -> Result<Tensor> {
        let in_dim = self.norm.x_mean.len();
        let mut data = Vec::with_capacity(rows.len() * in_dim);
        for (s, a) in rows {
            self.space.check_state(s)?;
            self.space.check_action(a)?;
            let start = data.len();
            data.extend_from_slice(s);
            data.extend_from_slice(a);
            self.norm.normalize_x(&mut data[start..]);
        }
        Tensor::new(vec![rows.len(), in_dim], data)
    }

    /// Predictions in normalized target units for normalized rows.
    pub fn predict_normalized(&self, x: &Tensor) -> Result<Tensor> {
        match &self.arch {
            Architecture::Mixture(m) => {
                let mut tape = Tape::new();
                let vars = self.params.bind_const(&mut tape);
                let xv = tape.constant(x.clone());
                let out = m.forward(&mut tape, &vars, xv)?;
                Ok(tape.value(out.pred).clone())
            }
            Architecture::Transformer(t) => {
                let mut tape = Tape::new();
                let vars = self.params.bind_const(&mut tape);
                let out = t.forward(&mut tape, &vars, x)?;
                Ok(tape.value(out.pred).clone())
            }
        }
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let x = self.normalized_rows(&[(s, a)])?;
        let mut y = self.predict_normalized(&x)?.into_data();
        self.norm.denormalize_y(&mut y);
        Ok(y)
    }

    /// Mask scores `(n + m) x n` for each row.
    pub fn scores_batch(&self, rows: &[(&[f64], &[f64])]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.normalized_rows(rows)?;
        match &self.arch {
            Architecture::Mixture(m) => Ok(m
                .flat_scores(&self.params, &x)?
                .into_iter()
                .map(|flat| component_block_max(&self.space, &flat))
                .collect()),
            Architecture::Transformer(t) => t.node_scores(&self.params, &x),
        }
    }

    pub fn scores(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scores_batch(&[(s, a)])?.remove(0))
    }

    /// Scores for many transitions, in chunks evaluated in parallel.
    pub fn scores_for(&self, ts: &[Transition], par: Parallelism) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 256;
        let chunks = par::try_map_indexed(par, ts.len().div_ceil(CHUNK), |c| {
            let slice = &ts[c * CHUNK..((c + 1) * CHUNK).min(ts.len())];
            let rows: Vec<(&[f64], &[f64])> = slice.iter().map(|t| (t.s.values(), t.a.values())).collect();
            self.scores_batch(&rows)
        })?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// `M_tau(s, a)`: entries whose score exceeds `tau`.
    pub fn mask(&self, s: &[f64], a: &[f64], tau: f64) -> Result<LocalMask> {
        Ok(threshold(&self.space, &self.scores(s, a)?, tau))
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = Meta {
            spec: self.spec.clone(),
            space: self.space.as_ref().clone(),
            normalizer: self.norm.clone(),
        };
        write_checkpoint(w, &self.params, &serde_json::to_value(meta)?)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let (params, meta) = read_checkpoint(r)?;
        let meta: Meta = serde_json::from_value(meta)?;
        let mut model = SandyModel::new(meta.spec, Arc::new(meta.space), meta.normalizer, 0)?;
        model.params.check_compatible(&params)?;
        model.params = params;
        Ok(model)
    }
}

/// Thresholds `(n + m) x n` scores at `tau`.
pub fn threshold(space: &FactoredSpace, scores: &[f64], tau: f64) -> LocalMask {
    let mut mask = LocalMask::for_space(space);
    let n = space.n_state();
    for (idx, &v) in scores.iter().enumerate() {
        if v > tau {
            mask.set(idx / n, idx % n, true);
        }
    }
    mask
}

/// A trained model used as a mask provider at a fixed threshold.
#[derive(Clone, Debug)]
pub struct Learned {
    model: Arc<SandyModel>,
    tau: f64,
}

impl Learned {
    pub fn new(model: Arc<SandyModel>, tau: f64) -> Self {
        Learned { model, tau }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn model(&self) -> &SandyModel {
        &self.model
    }
}

impl MaskProvider for Learned {
    fn space(&self) -> &Arc<FactoredSpace> {
        self.model.space()
    }

    fn mask(&self, s: &[f64], a: &[f64]) -> Result<LocalMask> {
        self.model.mask(s, a, self.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::tests::gradient_error;
    use crate::nn::Activation;
    use proptest::prelude::*;
    use rand::Rng;

    fn space() -> Arc<FactoredSpace> {
        Arc::new(FactoredSpace::uniform(3, 1, 1, 1).unwrap())
    }

    fn small_mixture(k: usize) -> SandyModel {
        let spec = ModelSpec::Mixture(MixtureConfig {
            experts: k,
            expert_hidden: vec![5, 4],
            gate_hidden: 4,
            activation: Activation::Tanh,
        });
        SandyModel::new(spec, space(), Normalizer::identity(4, 3), 3).unwrap()
    }

    fn small_transformer() -> SandyModel {
        let spec = ModelSpec::Transformer(TransformerConfig {
            width: 5,
            hidden: 4,
            key_dim: 3,
            blocks: 2,
            activation: Activation::Tanh,
        });
        SandyModel::new(spec, space(), Normalizer::identity(4, 3), 4).unwrap()
    }

    fn batch(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        (
            Tensor::new(vec![5, 4], draw(20)).unwrap(),
            Tensor::new(vec![5, 3], draw(15)).unwrap(),
        )
    }

    #[test]
    fn full_losses_match_finite_differences() {
        let (x, y) = batch(7);
        let penalties = Penalties {
            lambda1: 0.01,
            lambda2: 0.1,
            lambda3: 0.001,
        };
        for model in [small_mixture(3), small_transformer()] {
            let err = gradient_error(model.params.tensors(), |t, v| model.full_loss(t, v, &x, &y, &penalties));
            assert!(err < 1e-4, "{}: {err}", model.spec().name());
        }
    }

    #[test]
    fn extreme_thresholds() {
        let model = small_mixture(2);
        let s = [0.1, 0.2, 0.3];
        let a = [0.5];
        let full = model.mask(&s, &a, 0.0).unwrap();
        assert_eq!(full.count_ones(), 12);
        assert_eq!(model.mask(&s, &a, f64::INFINITY).unwrap().count_ones(), 0);
        let t = small_transformer();
        assert_eq!(t.mask(&s, &a, f64::INFINITY).unwrap().count_ones(), 0);
    }

    #[test]
    fn block_diagonal_expert_gives_block_diagonal_mask() {
        let mut model = small_mixture(1);
        let Architecture::Mixture(m) = model.arch.clone() else {
            unreachable!()
        };
        // expert weights: input i feeds hidden units of block i only;
        // component 2 and the action have small cross weights
        let e = &m.experts[0];
        let dims = e.dims().to_vec();
        for l in 0..e.n_layers() {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let mut w = vec![0.0; fi * fo];
            for i in 0..fi {
                for o in 0..fo {
                    let same = i % 3 == o % 3;
                    w[i * fo + o] = if same { 1.0 } else { 0.001 };
                }
            }
            *model.params.get_mut(e.weight_index(l)) = Tensor::new(vec![fi, fo], w).unwrap();
        }
        // node j feeds component j % 3 strongly, everything else weakly
        let expected = |j: usize, i: usize| j % 3 == i;
        let scores = model.scores(&[0.3, -0.2, 0.9], &[0.1]).unwrap();
        let (mut on_min, mut off_max) = (f64::INFINITY, 0.0f64);
        for (k, &v) in scores.iter().enumerate() {
            if expected(k / 3, k % 3) {
                on_min = on_min.min(v);
            } else {
                off_max = off_max.max(v);
            }
        }
        assert!(off_max < on_min);
        for tau in [off_max, 0.5 * (off_max + on_min), on_min * (1.0 - 1e-12)] {
            let mask = model.mask(&[0.3, -0.2, 0.9], &[0.1], tau).unwrap();
            for k in 0..12 {
                assert_eq!(mask.get(k / 3, k % 3), expected(k / 3, k % 3));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        for model in [small_mixture(2), small_transformer()] {
            let mut buf = Vec::new();
            model.save(&mut buf).unwrap();
            let back = SandyModel::load(&mut buf.as_slice()).unwrap();
            let s = [0.3, 0.1, -0.4];
            assert_eq!(model.predict(&s, &[0.2]).unwrap(), back.predict(&s, &[0.2]).unwrap());
            assert_eq!(model.scores(&s, &[0.2]).unwrap(), back.scores(&s, &[0.2]).unwrap());
        }
    }

    #[test]
    fn learned_provider_thresholds_scores() {
        let model = Arc::new(small_transformer());
        let provider = Learned::new(model.clone(), 0.3);
        let s = [0.3, 0.1, -0.4];
        let scores = model.scores(&s, &[0.2]).unwrap();
        let mask = provider.mask(&s, &[0.2]).unwrap();
        for (k, &v) in scores.iter().enumerate() {
            assert_eq!(mask.get(k / 3, k % 3), v > 0.3);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn masks_shrink_as_tau_grows(t1 in 0.0f64..2.0, dt in 0.0f64..2.0, x in prop::collection::vec(-2.0f64..2.0, 4)) {
            for model in [small_mixture(3), small_transformer()] {
                let lo = model.mask(&x[..3], &x[3..], t1).unwrap();
                let hi = model.mask(&x[..3], &x[3..], t1 + dt).unwrap();
                prop_assert!(hi.is_subset_of(&lo));
            }
        }
    }
}

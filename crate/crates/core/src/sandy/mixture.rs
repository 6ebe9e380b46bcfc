//! Mixture of MLP experts with a softmax gate. Each expert's weights give
//! a static Jacobian bound; the gate mixes the bounds per input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub experts: usize,
    pub expert_hidden: Vec<usize>,
    pub gate_hidden: usize,
    /// Hidden activation of the experts; must have derivative in `[0, 1]`.
    pub activation: Activation,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            experts: 8,
            expert_hidden: vec![64, 64],
            gate_hidden: 64,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub config: MixtureConfig,
    pub experts: Vec<Mlp>,
    pub gate: Mlp,
}

/// Tape handles of one forward pass.
pub struct MixtureForward {
    pub pred: Var,
    pub logits: Var,
    pub alpha: Var,
}

impl MixtureModel {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        config: MixtureConfig,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.experts == 0 {
            return Err(Error::InvalidConfig("mixture needs at least one expert".into()));
        }
        if config.activation == Activation::Gelu {
            return Err(Error::UnsupportedActivation("gelu"));
        }
        let mut dims = vec![in_dim];
        dims.extend(&config.expert_hidden);
        dims.push(out_dim);
        let experts = (0..config.experts)
            .map(|i| {
                Mlp::new(
                    params,
                    &format!("expert{i}"),
                    &dims,
                    config.activation,
                    Activation::Identity,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = Mlp::new(
            params,
            "gate",
            &[in_dim, config.gate_hidden, config.experts],
            Activation::Tanh,
            Activation::Identity,
            rng,
        )?;
        Ok(MixtureModel {
            config,
            experts,
            gate,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.gate.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<MixtureForward> {
        let logits = self.gate.forward(tape, vars, x)?;
        let alpha = tape.softmax(logits);
        let mut pred = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let h = expert.forward(tape, vars, x)?;
            let a_i = tape.slice_last(alpha, i, 1)?;
            let term = tape.mul_col(h, a_i)?;
            pred = Some(match pred {
                None => term,
                Some(p) => tape.add(p, term)?,
            });
        }
        Ok(MixtureForward {
            pred: pred.expect("at least one expert"),
            logits,
            alpha,
        })
    }

    /// `sqrt(mean_j logits_j^2 + eps)` summed over rows: the gate
    /// regularizer on pre-softmax activations.
    pub fn gate_penalty_sum(&self, tape: &mut Tape, logits: Var) -> Var {
        let sq = tape.square(logits);
        let m = tape.mean_last(sq);
        let m = tape.add_scalar(m, 1e-12);
        let r = tape.sqrt(m);
        tape.sum(r)
    }

    /// `(1/K) sum_i sum |J_i|` with `J_i` the expert Jacobian bounds.
    pub fn sparsity_penalty(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let mut total = None;
        for expert in &self.experts {
            let mut acc = tape.abs(vars[expert.weight_index(0)]);
            for l in 1..expert.n_layers() {
                let w = tape.abs(vars[expert.weight_index(l)]);
                acc = tape.matmul(acc, w)?;
            }
            let s = tape.sum(acc);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        let total = total.expect("at least one expert");
        Ok(tape.scale(total, 1.0 / self.experts.len() as f64))
    }

    /// Per-expert bounds `[in, out]`.
    pub fn bounds(&self, params: &ParamSet) -> Result<Vec<Tensor>> {
        self.experts.iter().map(|e| e.jacobian_bound(params)).collect()
    }

    /// Gate probabilities for a batch of (normalized) rows.
    pub fn gate_probs(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut logits = self.gate.eval(params, x)?;
        let k = logits.last_dim();
        for row in logits.data_mut().chunks_mut(k) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(logits)
    }

    /// `sum_i alpha_i(x) J_i` flattened `[in, out]`, one vector per row.
    pub fn flat_scores(&self, params: &ParamSet, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let bounds = self.bounds(params)?;
        let alpha = self.gate_probs(params, x)?;
        Ok((0..alpha.rows())
            .map(|r| {
                let mut acc = vec![0.0; bounds[0].numel()];
                for (a, b) in alpha.row(r).iter().zip(&bounds) {
                    acc.iter_mut().zip(b.data()).for_each(|(s, v)| *s += a * v);
                }
                acc
            })
            .collect())
    }
}

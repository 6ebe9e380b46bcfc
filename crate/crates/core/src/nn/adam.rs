use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: each step scales parameters by `1 - lr * weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        if let Some(i) = (0..grads.len()).find(|&i| grads[i].shape() != params.get(i).shape()) {
            return Err(Error::Shape {
                op: "adam",
                detail: format!(
                    "gradient {:?} vs parameter {} {:?}",
                    grads[i].shape(),
                    params.name(i),
                    params.get(i).shape()
                ),
            });
        }
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g.data()[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g.data()[k] * g.data()[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] = p[k] * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

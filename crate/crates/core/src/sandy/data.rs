use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, FactoredSpace, Result, Transition};

/// Flat regression data: inputs `s ++ a`, targets `s'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FlatData {
    pub fn from_transitions(space: &FactoredSpace, ts: &[Transition]) -> Result<Self> {
        let (ns, na) = (space.state_len(), space.action_len());
        let mut x = Vec::with_capacity(ts.len() * (ns + na));
        let mut y = Vec::with_capacity(ts.len() * ns);
        for t in ts {
            if t.space().as_ref() != space {
                return Err(Error::SpaceMismatch);
            }
            x.extend_from_slice(t.s.values());
            x.extend_from_slice(t.a.values());
            y.extend_from_slice(t.s_next.values());
        }
        Ok(FlatData {
            x,
            y,
            in_dim: ns + na,
            out_dim: ns,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.out_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` as `([len, in], [len, out])` tensors.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(idx.len() * self.in_dim);
        let mut y = Vec::with_capacity(idx.len() * self.out_dim);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.in_dim..(i + 1) * self.in_dim]);
            y.extend_from_slice(&self.y[i * self.out_dim..(i + 1) * self.out_dim]);
        }
        (
            Tensor::new(vec![idx.len(), self.in_dim], x).expect("row width"),
            Tensor::new(vec![idx.len(), self.out_dim], y).expect("row width"),
        )
    }
}

/// Per-coordinate affine standardization of inputs and targets. Constant
/// coordinates get unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn moments(data: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (data.len() / dim.max(1)).max(1) as f64;
    let mut mean = vec![0.0; dim];
    for row in data.chunks(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in data.chunks(dim) {
        for k in 0..dim {
            var[k] += (row[k] - mean[k]).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-8 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        Normalizer {
            x_mean: vec![0.0; in_dim],
            x_std: vec![1.0; in_dim],
            y_mean: vec![0.0; out_dim],
            y_std: vec![1.0; out_dim],
        }
    }

    pub fn fit(data: &FlatData) -> Self {
        let (x_mean, x_std) = moments(&data.x, data.in_dim);
        let (y_mean, y_std) = moments(&data.y, data.out_dim);
        Normalizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn apply(&self, data: &FlatData) -> FlatData {
        let mut out = data.clone();
        for row in out.x.chunks_mut(data.in_dim) {
            self.normalize_x(row);
        }
        for row in out.y.chunks_mut(data.out_dim) {
            for k in 0..row.len() {
                row[k] = (row[k] - self.y_mean[k]) / self.y_std[k];
            }
        }
        out
    }

    pub fn normalize_x(&self, row: &mut [f64]) {
        for k in 0..row.len() {
            row[k] = (row[k] - self.x_mean[k]) / self.x_std[k];
        }
    }

    pub fn denormalize_y(&self, row: &mut [f64]) {
        for k in 0..row.len() {
            row[k] = row[k] * self.y_std[k] + self.y_mean[k];
        }
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Activation, Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    w: usize,
    b: usize,
    act: Activation,
}

/// A dense network `h = act(h W + b)` whose weights live in a shared
/// [`ParamSet`]. Weights are stored `[in, out]`, so products of weight
/// magnitudes are already in (input, output) orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Registers the layers of a `dims[0] -> ... -> dims[L]` network under
    /// `prefix`. Hidden layers use `hidden`, the last one `output`.
    /// Weights and biases are uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "mlp needs at least two positive dims, got {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let w = params.add(
                format!("{prefix}.{l}.w"),
                Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out))?,
            );
            let b = params.add(format!("{prefix}.{l}.b"), Tensor::new(vec![fan_out], draw(fan_out))?);
            let act = if l + 2 == dims.len() { output } else { hidden };
            layers.push(Layer { w, b, act });
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Index of layer `l`'s weight tensor in the parameter set.
    pub fn weight_index(&self, l: usize) -> usize {
        self.layers[l].w
    }

    pub fn bias_index(&self, l: usize) -> usize {
        self.layers[l].b
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.act).collect()
    }

    /// Forward pass on `x [..., in_dim]`; `vars` are the bound parameters.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = tape.matmul(h, vars[layer.w])?;
            h = tape.add_bias(h, vars[layer.b])?;
            h = tape.act(h, layer.act);
        }
        Ok(h)
    }

    /// Forward pass on a batch of rows, without gradient tracking.
    pub fn eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = h.matmul(params.get(layer.w))?;
            let b = params.get(layer.b).data();
            let n = b.len();
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v = layer.act.apply(*v + b[k % n]);
            }
            h = z;
        }
        Ok(h)
    }

    /// `|W_1| |W_2| ... |W_L|` as an `[in_dim, out_dim]` matrix. Entry
    /// `(i, j)` bounds `|d out_j / d in_i|` at every input because each
    /// activation derivative lies in `[0, 1]`.
    pub fn jacobian_bound(&self, params: &ParamSet) -> Result<Tensor> {
        for layer in &self.layers {
            if layer.act == Activation::Gelu {
                return Err(Error::UnsupportedActivation(layer.act.name()));
            }
        }
        let mut acc = params.get(self.layers[0].w).abs();
        for layer in &self.layers[1..] {
            acc = acc.matmul(&params.get(layer.w).abs())?;
        }
        Ok(acc)
    }

    /// Exact input-output Jacobian `[in_dim, out_dim]` at `x`, by reverse
    /// mode once per output.
    pub fn jacobian(&self, params: &ParamSet, x: &[f64]) -> Result<Tensor> {
        let (n_in, n_out) = (self.in_dim(), self.out_dim());
        let mut jac = Tensor::zeros(&[n_in, n_out]);
        for j in 0..n_out {
            let mut tape = Tape::new();
            let vars = params.bind_const(&mut tape);
            let xv = tape.param(Tensor::new(vec![1, n_in], x.to_vec())?);
            let y = self.forward(&mut tape, &vars, xv)?;
            let yj = tape.slice_last(y, j, 1)?;
            let l = tape.sum(yj);
            let g = tape.backward(l)?;
            let gx = g.get_or_zeros(xv, tape.value(xv));
            for i in 0..n_in {
                jac.data_mut()[i * n_out + j] = gx.data()[i];
            }
        }
        Ok(jac)
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::params::ParamSet;
use super::tape::{Activation, Tape, Var};
use crate::{Error, Result};

/// Single-head self-attention whose query, key and value maps are
/// two-layer MLPs. Scores are scaled dot products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub q: Mlp,
    pub k: Mlp,
    pub v: Mlp,
    d_k: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_k: usize,
        d_out: usize,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let id = Activation::Identity;
        Ok(AttentionBlock {
            q: Mlp::new(params, &format!("{prefix}.q"), &[d_in, hidden, d_k], act, id, rng)?,
            k: Mlp::new(params, &format!("{prefix}.k"), &[d_in, hidden, d_k], act, id, rng)?,
            v: Mlp::new(params, &format!("{prefix}.v"), &[d_in, hidden, d_out], act, id, rng)?,
            d_k,
        })
    }

    pub fn d_out(&self) -> usize {
        self.v.out_dim()
    }

    /// `x [B, T, d_in]` to `(Y [B, T, d_out], A [B, T, T])` with
    /// `A[b, i, :] = softmax_j(<Q x_i, K x_j> / sqrt(d_k))` and
    /// `Y[b, i] = sum_j A[b, i, j] V x_j`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "attention",
                detail: format!("expected [batch, set, dim], got {shape:?}"),
            });
        }
        if shape[1] == 0 {
            return Err(Error::Empty("attention input set"));
        }
        let q = self.q.forward(tape, vars, x)?;
        let k = self.k.forward(tape, vars, x)?;
        let v = self.v.forward(tape, vars, x)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (self.d_k as f64).sqrt());
        let a = tape.softmax(scores);
        let y = tape.bmm(a, v, false)?;
        Ok((y, a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::tests::{gradient_error, random_tensor};
    use crate::nn::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(seed: u64) -> (ParamSet, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let b = AttentionBlock::new(&mut p, "att", 4, 6, 3, 5, Activation::Tanh, &mut rng).unwrap();
        (p, b)
    }

    fn run(p: &ParamSet, b: &AttentionBlock, x: Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = p.bind_const(&mut tape);
        let xv = tape.constant(x);
        let (y, a) = b.forward(&mut tape, &vars, xv)?;
        Ok((tape.value(y).clone(), tape.value(a).clone()))
    }

    #[test]
    fn singleton_set_attends_to_itself() {
        let (p, b) = block(1);
        let (_, a) = run(&p, &b, Tensor::full(&[2, 1, 4], 0.3)).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let (mut p, b) = block(2);
        for l in 0..b.q.n_layers() {
            let w = b.q.weight_index(l);
            let bi = b.q.bias_index(l);
            *p.get_mut(w) = Tensor::zeros(p.get(w).shape());
            *p.get_mut(bi) = Tensor::zeros(p.get(bi).shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, a) = run(&p, &b, random_tensor(&[1, 4, 4], &mut rng)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rows_sum_to_one_and_gradients_check() {
        let (p, b) = block(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 3, 4], &mut rng);
        let (y, a) = run(&p, &b, x.clone()).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let n = p.len();
        let mut inputs = p.tensors().to_vec();
        inputs.push(x);
        let err = gradient_error(&inputs, |t, v| {
            let (y, a) = b.forward(t, &v[..n], v[n])?;
            let y = t.square(y);
            let sy = t.mean(y);
            let a2 = t.square(a);
            let sa = t.sum(a2);
            t.add(sy, sa)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn empty_set_is_rejected() {
        let (p, b) = block(5);
        assert!(matches!(run(&p, &b, Tensor::zeros(&[1, 0, 4])), Err(Error::Empty(_))));
    }
}

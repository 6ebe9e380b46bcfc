//! Stacked single-head self-attention over component tokens.
//!
//! Token `c` is the flat `(s, a)` input with every feature outside node `c`
//! zeroed, followed by a one-hot code of `c`, embedded by one shared linear
//! map. Blocks have no residual path,
//! so output token `i` reaches input token `j` only through the product of
//! the blocks' attention matrices, which is the mask score. A shared linear
//! head maps each token to `max_i dim(S^i)` features and state token `i`
//! keeps the first `dim(S^i)` of them; action tokens' outputs are discarded.
//! The head sees one token at a time, so routing can only happen through
//! attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, AttentionBlock, Mlp, ParamSet, Tape, Tensor, Var};
use crate::{Error, FactoredSpace, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub width: usize,
    pub hidden: usize,
    pub key_dim: usize,
    pub blocks: usize,
    pub activation: Activation,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            width: 32,
            hidden: 32,
            key_dim: 16,
            blocks: 2,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    space: FactoredSpace,
    embed: Mlp,
    blocks: Vec<AttentionBlock>,
    head: Mlp,
}

pub struct TransformerForward {
    pub pred: Var,
    /// One `[B, N, N]` attention matrix per block.
    pub attention: Vec<Var>,
}

impl TransformerModel {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        config: TransformerConfig,
        space: &FactoredSpace,
        rng: &mut R,
    ) -> Result<Self> {
        if config.blocks == 0 || config.width == 0 || config.key_dim == 0 {
            return Err(Error::InvalidConfig(
                "transformer needs positive width, key_dim and block count".into(),
            ));
        }
        let in_dim = space.state_len() + space.action_len() + space.n_nodes();
        let id = Activation::Identity;
        let embed = Mlp::new(params, "embed", &[in_dim, config.width], id, id, rng)?;
        let blocks = (0..config.blocks)
            .map(|b| {
                AttentionBlock::new(
                    params,
                    &format!("block{b}"),
                    config.width,
                    config.hidden,
                    config.key_dim,
                    config.width,
                    config.activation,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head_dim = space
            .state_components()
            .iter()
            .map(|c| c.dim)
            .max()
            .unwrap_or(0);
        let head = Mlp::new(params, "head", &[config.width, head_dim], id, id, rng)?;
        Ok(TransformerModel {
            config,
            space: space.clone(),
            embed,
            blocks,
            head,
        })
    }

    pub fn space(&self) -> &FactoredSpace {
        &self.space
    }

    /// `[B, N, in + N]` tokens from `[B, in]` rows.
    fn tokens(&self, x: &Tensor) -> Tensor {
        let n = self.space.n_nodes();
        let d = x.last_dim() + n;
        let b = x.rows();
        let mut data = vec![0.0; b * n * d];
        for r in 0..b {
            let row = x.row(r);
            for node in 0..n {
                let base = (r * n + node) * d;
                for k in self.space.node_range(node) {
                    data[base + k] = row[k];
                }
                data[base + x.last_dim() + node] = 1.0;
            }
        }
        Tensor::new(vec![b, n, d], data).expect("token count")
    }

    /// `[N * D, S]` gather matrix: head feature `k` of state token `i` lands
    /// on flat state coordinate `start(i) + k`.
    fn gather(&self, head_dim: usize) -> Tensor {
        let n = self.space.n_nodes();
        let s = self.space.state_len();
        let mut data = vec![0.0; n * head_dim * s];
        for i in 0..self.space.n_state() {
            for (k, j) in self.space.state_range(i).enumerate() {
                data[(i * head_dim + k) * s + j] = 1.0;
            }
        }
        Tensor::new(vec![n * head_dim, s], data).expect("gather size")
    }

    /// Forward pass on `[B, in]` (normalized) rows.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: &Tensor) -> Result<TransformerForward> {
        let b = x.rows();
        let n = self.space.n_nodes();
        let tokens = tape.constant(self.tokens(x));
        let mut h = self.embed.forward(tape, vars, tokens)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(tape, vars, h)?;
            attention.push(a);
            h = y;
        }
        let out = self.head.forward(tape, vars, h)?;
        let head_dim = self.head.out_dim();
        let flat = tape.reshape(out, &[b, n * head_dim])?;
        let gather = tape.constant(self.gather(head_dim));
        let pred = tape.matmul(flat, gather)?;
        Ok(TransformerForward { pred, attention })
    }

    /// Row-major `N x N` products `A_B ... A_1` per row of `x`.
    pub fn attention_products(&self, params: &ParamSet, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = params.bind_const(&mut tape);
        let fwd = self.forward(&mut tape, &vars, x)?;
        let n = self.space.n_nodes();
        let mats: Vec<&Tensor> = fwd.attention.iter().map(|&a| tape.value(a)).collect();
        Ok((0..x.rows())
            .map(|r| {
                let slice = |t: &Tensor| t.data()[r * n * n..(r + 1) * n * n].to_vec();
                let mut acc = slice(mats[0]);
                for m in &mats[1..] {
                    acc = mat_mul_square(&slice(m), &acc, n);
                }
                acc
            })
            .collect())
    }

    /// Mask scores `(n + m) x n`: entry `(j, i)` is the product-attention
    /// weight of output token `i` on input token `j`.
    pub fn node_scores(&self, params: &ParamSet, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n_nodes = self.space.n_nodes();
        let n = self.space.n_state();
        Ok(self
            .attention_products(params, x)?
            .into_iter()
            .map(|p| {
                let mut out = vec![0.0; n_nodes * n];
                for j in 0..n_nodes {
                    for i in 0..n {
                        out[j * n + i] = p[i * n_nodes + j];
                    }
                }
                out
            })
            .collect())
    }
}

/// `a b` for row-major `n x n` matrices.
pub(crate) fn mat_mul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

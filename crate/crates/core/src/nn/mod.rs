//! Dense tensors, a reverse-mode tape, MLPs, attention, Adam and
//! checkpoints.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use attention::AttentionBlock;
pub use mlp::Mlp;
pub use params::ParamSet;
pub use tape::{Activation, Grads, Tape, Var};
pub use tensor::Tensor;

use crate::par::{tree_reduce, try_map_indexed, Parallelism};
use crate::Result;

/// Evaluates `n_shards` partial losses, each on its own tape, and returns
/// the summed loss and parameter gradients. `build(tape, vars, shard)` must
/// return the shard's contribution so that the contributions add up to the
/// full objective. The shard count, not the thread count, fixes the
/// summation order.
pub fn sharded_loss_and_grads<F>(
    params: &ParamSet,
    n_shards: usize,
    par: Parallelism,
    build: F,
) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var], usize) -> Result<Var> + Sync + Send,
{
    let parts = try_map_indexed(par, n_shards, |shard| {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let loss = build(&mut tape, &vars, shard)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, params.collect_grads(&grads, &vars)))
    })?;
    let zero = || {
        (
            0.0,
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        )
    };
    Ok(tree_reduce(parts, |(la, mut ga), (lb, gb)| {
        for (a, b) in ga.iter_mut().zip(&gb) {
            a.add_assign(b);
        }
        (la + lb, ga)
    })
    .unwrap_or_else(zero))
}

/// Contiguous `[start, end)` row ranges splitting `n` rows into `shards`.
pub fn shard_range(n: usize, shards: usize, shard: usize) -> (usize, usize) {
    let start = n * shard / shards;
    let end = n * (shard + 1) / shards;
    (start, end)
}

//! Data-parallel execution with a sequential fallback.
//!
//! Every parallel entry point in the crate takes a [`Parallelism`] and routes
//! its inner loop through [`map_indexed`]. Results are always collected in
//! index order and reductions go through [`tree_reduce`], so the sequential
//! and rayon paths produce bit-identical output.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Runs on the rayon pool when the `parallel` feature is enabled and
    /// sequentially otherwise.
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but short-circuits on the first error (by index
/// order in the sequential path; any error in the parallel path).
pub fn try_map_indexed<T, F>(par: Parallelism, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Pairwise reduction with a fixed shape: the combine order depends only on
/// `items.len()`, never on scheduling.
pub fn tree_reduce<T, F>(mut items: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Configures the global rayon pool. A no-op without the `parallel` feature.
pub fn set_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("thread count must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let seq = map_indexed(Parallelism::Sequential, 100, |i| i * i);
        let par = map_indexed(Parallelism::Rayon, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn tree_reduce_shape_is_fixed() {
        let xs: Vec<f64> = (0..13).map(|i| 0.1 * i as f64).collect();
        let a = tree_reduce(xs.clone(), |a, b| a + b).unwrap();
        let b = tree_reduce(xs, |a, b| a + b).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(tree_reduce(Vec::<f64>::new(), |a, b| a + b).is_none());
    }
}

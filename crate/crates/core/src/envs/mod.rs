//! Deterministic locally factored environments.
//!
//! Every environment implements [`MaskedDynamics`]: a pure step function
//! that returns the next state together with the ground-truth local mask of
//! the step. Randomness only enters through [`Environment::reset`] and
//! [`Environment::random_action`], which take an explicit RNG.

pub mod bouncing;
pub mod synthetic_mp;
pub mod two_room;

use std::sync::Arc;

use rand::Rng;

use crate::{FactoredSpace, LocalMask, Result, Transition};

pub use bouncing::{BouncingBall, BouncingBallConfig, PairProximity, TaskKind, TaskSpec};
pub use synthetic_mp::{SyntheticMp, SyntheticMpConfig};
pub use two_room::{TwoRoom, TwoRoomConfig};

/// A step function that also reports which components interacted.
pub trait MaskedDynamics: Send + Sync {
    fn space(&self) -> &Arc<FactoredSpace>;

    /// `(s', M(s, a))`
    fn step(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, LocalMask)>;
}

pub trait Environment: MaskedDynamics {
    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    fn random_action(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
}

/// Reward and termination recomputation for (possibly counterfactual)
/// transitions.
pub trait RewardFn: Send + Sync {
    fn relabel(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> (f64, bool);
}

/// Rolls a uniformly random policy for `n` steps, resetting with
/// probability `reset_prob` before every step.
pub fn collect_random<E: Environment + ?Sized>(
    env: &E,
    n: usize,
    reset_prob: f64,
    reward: Option<&dyn RewardFn>,
    rng: &mut dyn rand::RngCore,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let mut s = env.reset(rng);
    for _ in 0..n {
        if rng.random::<f64>() < reset_prob {
            s = env.reset(rng);
        }
        let a = env.random_action(rng);
        let (s_next, _) = env.step(&s, &a)?;
        let (r, terminal) = reward.map_or((0.0, false), |f| f.relabel(&s, &a, &s_next));
        out.push(Transition::new(
            env.space(),
            s.clone(),
            a,
            s_next.clone(),
            r,
            terminal,
        )?);
        s = if terminal { env.reset(rng) } else { s_next };
    }
    Ok(out)
}

/// Central finite-difference Jacobian `d s' / d (s, a)`, laid out with one
/// row per flat input coordinate and one column per flat output coordinate
/// (the mask orientation).
pub fn finite_difference_jacobian<E: MaskedDynamics + ?Sized>(
    env: &E,
    s: &[f64],
    a: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let space = env.space();
    let (ns, na) = (space.state_len(), space.action_len());
    let mut jac = vec![0.0; (ns + na) * ns];
    let mut x: Vec<f64> = s.iter().chain(a).copied().collect();
    for row in 0..ns + na {
        let orig = x[row];
        x[row] = orig + h;
        let (plus, _) = env.step(&x[..ns], &x[ns..])?;
        x[row] = orig - h;
        let (minus, _) = env.step(&x[..ns], &x[ns..])?;
        x[row] = orig;
        for col in 0..ns {
            jac[row * ns + col] = (plus[col] - minus[col]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Collapses a flat `(S + A) x S` matrix to component blocks by taking the
/// largest absolute entry of each block; returns `(n + m) x n` values.
pub fn component_block_max(space: &FactoredSpace, flat: &[f64]) -> Vec<f64> {
    let (n, rows) = (space.n_state(), space.n_nodes());
    let ns = space.state_len();
    let mut out = vec![0.0f64; rows * n];
    for r in 0..rows {
        for c in 0..n {
            let mut best = 0.0f64;
            for i in space.node_range(r) {
                for j in space.state_range(c) {
                    best = best.max(flat[i * ns + j].abs());
                }
            }
            out[r * n + c] = best;
        }
    }
    out
}

/// Agreement between a ground-truth mask and finite-difference magnitudes:
/// returns `(agreeing, decided)` entry counts, where entries with magnitude
/// between `lo` and `hi` are undecided.
pub fn mask_agreement(mask: &LocalMask, magnitudes: &[f64], lo: f64, hi: f64) -> (usize, usize) {
    let mut agree = 0;
    let mut decided = 0;
    for (idx, &on) in mask.entries().iter().enumerate() {
        let mag = magnitudes[idx];
        if mag > hi {
            decided += 1;
            agree += on as usize;
        } else if mag < lo {
            decided += 1;
            agree += (!on) as usize;
        }
    }
    (agree, decided)
}

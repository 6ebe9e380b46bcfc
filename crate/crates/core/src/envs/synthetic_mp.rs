//! Synthetic block-structured Markov processes without actions.
//!
//! The state is split into blocks (default sizes 4, 3, 2), each coordinate a
//! scalar component. Block `b` evolves by a local map `g_b(s_b)`; in the
//! nonstationary variant every block additionally contributes a global term
//! `G_b(s_b)` to all coordinates whenever `||s_b||_2 > epsilon`.
//!
//! `g_b` and `G_b` are single-hidden-layer GELU networks with seeded
//! Gaussian weights. The output layers are rescaled so that each map has
//! unit empirical second moment on a fixed probe set of standard normal
//! inputs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Environment, MaskedDynamics};
use crate::factored::check_len;
use crate::{Error, FactoredSpace, LocalMask, Result};

const PROBE_SAMPLES: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMpConfig {
    pub block_dims: Vec<usize>,
    pub hidden_units: usize,
    /// `None` is the stationary process.
    pub epsilon: Option<f64>,
    pub weight_seed: u64,
}

impl Default for SyntheticMpConfig {
    fn default() -> Self {
        SyntheticMpConfig {
            block_dims: vec![4, 3, 2],
            hidden_units: 32,
            epsilon: None,
            weight_seed: 0,
        }
    }
}

impl SyntheticMpConfig {
    pub fn nonstationary(epsilon: f64) -> Self {
        SyntheticMpConfig {
            epsilon: Some(epsilon),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_dims.is_empty() || self.block_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "block_dims must be nonempty and positive".into(),
            ));
        }
        if self.hidden_units == 0 {
            return Err(Error::InvalidConfig("hidden_units must be positive".into()));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(Error::InvalidConfig("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `x -> W2 gelu(W1 x + b1) + b2`, weights stored row-major `[out][in]`.
#[derive(Clone, Debug)]
struct TwoLayer {
    d_in: usize,
    hidden: usize,
    d_out: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TwoLayer {
    fn random(d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        };
        let w1 = normal(hidden * d_in, 1.0 / (d_in as f64).sqrt());
        let b1 = normal(hidden, 1.0 / (d_in as f64).sqrt());
        let w2 = normal(d_out * hidden, 1.0 / (hidden as f64).sqrt());
        let b2 = normal(d_out, 1.0 / (hidden as f64).sqrt());
        TwoLayer {
            d_in,
            hidden,
            d_out,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let mut h = self.b1.clone();
        for (k, hk) in h.iter_mut().enumerate() {
            let row = &self.w1[k * self.d_in..(k + 1) * self.d_in];
            *hk = gelu(*hk + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
        for (o, out_o) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *out_o = self.b2[o] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn rescale_output(&mut self, k: f64) {
        self.w2
            .iter_mut()
            .chain(self.b2.iter_mut())
            .for_each(|w| *w *= k);
    }

    /// Scales the output layer so that `E[|f(x)|^2] / d_out = 1` over `probe`.
    fn normalize(&mut self, probe: &[Vec<f64>]) {
        let mut out = vec![0.0; self.d_out];
        let mut acc = 0.0;
        for x in probe {
            self.eval(x, &mut out);
            acc += out.iter().map(|v| v * v).sum::<f64>();
        }
        let second = acc / (probe.len() * self.d_out) as f64;
        if second > 0.0 {
            self.rescale_output(1.0 / second.sqrt());
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticMp {
    config: SyntheticMpConfig,
    space: Arc<FactoredSpace>,
    offsets: Vec<usize>,
    local: Vec<TwoLayer>,
    global: Vec<TwoLayer>,
}

impl SyntheticMp {
    pub fn new(config: SyntheticMpConfig) -> Result<Self> {
        config.validate()?;
        let total: usize = config.block_dims.iter().sum();
        let space = Arc::new(FactoredSpace::uniform(total, 1, 0, 1)?);
        let mut offsets = Vec::with_capacity(config.block_dims.len() + 1);
        offsets.push(0);
        for d in &config.block_dims {
            offsets.push(offsets.last().unwrap() + d);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let mut local = Vec::new();
        let mut global = Vec::new();
        for &d in &config.block_dims {
            local.push(TwoLayer::random(d, config.hidden_units, d, &mut rng));
            global.push(TwoLayer::random(d, config.hidden_units, total, &mut rng));
        }
        // probe inputs come from a stream separate from the weights
        rng.set_stream(1);
        for (b, &d) in config.block_dims.iter().enumerate() {
            let probe: Vec<Vec<f64>> = (0..PROBE_SAMPLES)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            local[b].normalize(&probe);
            global[b].normalize(&probe);
        }
        Ok(SyntheticMp {
            config,
            space,
            offsets,
            local,
            global,
        })
    }

    pub fn config(&self) -> &SyntheticMpConfig {
        &self.config
    }

    pub fn n_blocks(&self) -> usize {
        self.config.block_dims.len()
    }

    /// Coordinate range of block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Which blocks have their global term switched on at `s`.
    pub fn active_blocks(&self, s: &[f64]) -> Vec<bool> {
        (0..self.n_blocks())
            .map(|b| match self.config.epsilon {
                None => false,
                Some(eps) => {
                    let norm = s[self.block_range(b)]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    norm > eps
                }
            })
            .collect()
    }

    /// i.i.d. standard normal state.
    pub fn sample_state<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.space.state_len())
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }
}

impl MaskedDynamics for SyntheticMp {
    fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, LocalMask)> {
        let n = self.space.state_len();
        check_len("synthetic state", n, s.len())?;
        check_len("action", 0, a.len())?;
        let active = self.active_blocks(s);
        let mut next = vec![0.0; n];
        let mut mask = LocalMask::empty(n, 0);
        let mut global_out = vec![0.0; n];
        for b in 0..self.n_blocks() {
            let range = self.block_range(b);
            self.local[b].eval(&s[range.clone()], &mut next[range.clone()]);
            for row in range.clone() {
                for col in range.clone() {
                    mask.set(row, col, true);
                }
            }
        }
        for b in (0..self.n_blocks()).filter(|&b| active[b]) {
            let range = self.block_range(b);
            self.global[b].eval(&s[range.clone()], &mut global_out);
            next.iter_mut().zip(&global_out).for_each(|(x, g)| *x += g);
            for row in range {
                for col in 0..n {
                    mask.set(row, col, true);
                }
            }
        }
        Ok((next, mask))
    }
}

impl Environment for SyntheticMp {
    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.sample_state(rng)
    }

    fn random_action(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{component_block_max, finite_difference_jacobian, mask_agreement};
    use crate::factored::components;

    #[test]
    fn stationary_mask_has_three_blocks() {
        let mp = SyntheticMp::new(SyntheticMpConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = mp.sample_state(&mut rng);
            let (_, mask) = mp.step(&s, &[]).unwrap();
            let p = components(&mask);
            let mut sizes: Vec<usize> = p.blocks().iter().map(Vec::len).collect();
            sizes.sort_unstable();
            assert_eq!(sizes, vec![2, 3, 4]);
        }
    }

    #[test]
    fn zero_state_matches_stationary_mask() {
        let mp = SyntheticMp::new(SyntheticMpConfig::nonstationary(1.5)).unwrap();
        let st = SyntheticMp::new(SyntheticMpConfig::default()).unwrap();
        let z = vec![0.0; 9];
        assert_eq!(mp.step(&z, &[]).unwrap().1, st.step(&z, &[]).unwrap().1);
        // same weights: the local maps agree when no indicator fires
        assert_eq!(mp.step(&z, &[]).unwrap().0, st.step(&z, &[]).unwrap().0);
    }

    #[test]
    fn active_first_block_is_dense_and_matches_jacobian() {
        let mp = SyntheticMp::new(SyntheticMpConfig::nonstationary(1.5)).unwrap();
        let mut s = vec![0.1; 9];
        s[..4].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(mp.active_blocks(&s), vec![true, false, false]);
        let (_, mask) = mp.step(&s, &[]).unwrap();
        for row in 0..9 {
            for col in 0..9 {
                let expected = row < 4 || (mp.block_of(row) == mp.block_of(col));
                assert_eq!(mask.get(row, col), expected, "({row},{col})");
            }
        }
        let jac = finite_difference_jacobian(&mp, &s, &[], 1e-5).unwrap();
        let mags = component_block_max(mp.space(), &jac);
        let (agree, decided) = mask_agreement(&mask, &mags, 1e-9, 1e-7);
        assert_eq!(decided, 81);
        assert_eq!(agree, 81);
    }

    #[test]
    fn outputs_have_unit_scale_and_are_deterministic() {
        let mp = SyntheticMp::new(SyntheticMpConfig::default()).unwrap();
        let again = SyntheticMp::new(SyntheticMpConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut second = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let s = mp.sample_state(&mut rng);
            let (x, _) = mp.step(&s, &[]).unwrap();
            let (y, _) = again.step(&s, &[]).unwrap();
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
            second += x.iter().map(|v| v * v).sum::<f64>() / 9.0;
        }
        let second = second / trials as f64;
        assert!((0.8..1.25).contains(&second), "second moment {second}");
    }

    #[test]
    fn gelu_is_exact() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!(SyntheticMp::new(SyntheticMpConfig {
            epsilon: Some(-1.0),
            ..Default::default()
        })
        .is_err());
    }

    impl SyntheticMp {
        fn block_of(&self, coord: usize) -> usize {
            (0..self.n_blocks())
                .find(|&b| self.block_range(b).contains(&coord))
                .unwrap()
        }
    }
}

//! Bouncing sprites on the unit square with a 2-D continuous action.
//!
//! Sprite `i` occupies state component `i` as `(x, y, vx, vy)`. The action
//! accelerates sprite 0 only; other sprites are moved by the agent through
//! collisions.
//!
//! One step:
//! 1. `v0 += action_gain * a`, then clip sprite 0 to `max_speed`;
//! 2. `p += v` for every sprite (semi-implicit Euler);
//! 3. elastic wall reflection;
//! 4. pairwise equal-mass elastic collisions in ascending `(i, j)` order,
//!    firing when the centres are within `2 r + collision_margin` and
//!    closing;
//! 5. clip every sprite to `max_speed`.
//!
//! The returned mask tracks dependencies exactly: every sprite starts
//! depending on itself (and sprite 0 on the action), and a collision merges
//! the dependency sets of the two sprites involved. Chains of collisions
//! within one step therefore show up as the transitive dependencies they
//! are.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, MaskedDynamics, RewardFn};
use crate::factored::{check_len, Component};
use crate::{Error, FactoredSpace, LocalMask, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BouncingBallConfig {
    pub num_sprites: usize,
    pub sprite_radius: f64,
    pub max_speed: f64,
    pub action_gain: f64,
    pub collision_margin: f64,
    pub seed: u64,
}

impl Default for BouncingBallConfig {
    fn default() -> Self {
        BouncingBallConfig {
            num_sprites: 4,
            sprite_radius: 0.07,
            max_speed: 0.05,
            action_gain: 0.01,
            collision_margin: 0.0025,
            seed: 0,
        }
    }
}

impl BouncingBallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sprites == 0 || self.num_sprites > 62 {
            return Err(Error::InvalidConfig("num_sprites must be in 1..=62".into()));
        }
        if !(self.sprite_radius > 0.0) || self.sprite_radius >= 0.25 {
            return Err(Error::InvalidConfig(
                "sprite_radius must be in (0, 0.25)".into(),
            ));
        }
        if !(self.max_speed > 0.0) || self.max_speed >= 1.0 - 2.0 * self.sprite_radius {
            return Err(Error::InvalidConfig(
                "max_speed must be positive and smaller than the free width".into(),
            ));
        }
        if !(self.action_gain >= 0.0) || !(self.collision_margin >= 0.0) {
            return Err(Error::InvalidConfig(
                "action_gain and collision_margin must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn collision_distance(&self) -> f64 {
        2.0 * self.sprite_radius + self.collision_margin
    }
}

/// Distance between two sprites after integration, before collisions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairProximity {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub closing: bool,
}

#[derive(Clone, Debug)]
pub struct BouncingBall {
    config: BouncingBallConfig,
    space: Arc<FactoredSpace>,
}

impl BouncingBall {
    pub fn new(config: BouncingBallConfig) -> Result<Self> {
        config.validate()?;
        let space = FactoredSpace::new(
            (0..config.num_sprites)
                .map(|i| Component::new(format!("sprite{i}"), 4))
                .collect(),
            vec![Component::new("action", 2)],
        )?;
        Ok(BouncingBall {
            config,
            space: Arc::new(space),
        })
    }

    pub fn config(&self) -> &BouncingBallConfig {
        &self.config
    }

    fn clip_speed(&self, v: &mut [f64]) {
        let speed = v[0].hypot(v[1]);
        if speed > self.config.max_speed {
            let k = self.config.max_speed / speed;
            v[0] *= k;
            v[1] *= k;
        }
    }

    fn check(&self, s: &[f64], a: &[f64]) -> Result<()> {
        check_len("sprite state", self.space.state_len(), s.len())?;
        check_len("action", 2, a.len())
    }

    /// Integrates positions and walls (steps 1-3) without resolving
    /// collisions.
    fn integrate(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let mut x = s.to_vec();
        let ax = a[0].clamp(-1.0, 1.0);
        let ay = a[1].clamp(-1.0, 1.0);
        x[2] += c.action_gain * ax;
        x[3] += c.action_gain * ay;
        self.clip_speed(&mut x[2..4]);
        let (lo, hi) = (c.sprite_radius, 1.0 - c.sprite_radius);
        for sprite in x.chunks_exact_mut(4) {
            for axis in 0..2 {
                let mut p = sprite[axis] + sprite[axis + 2];
                if p < lo {
                    p = 2.0 * lo - p;
                    sprite[axis + 2] = -sprite[axis + 2];
                } else if p > hi {
                    p = 2.0 * hi - p;
                    sprite[axis + 2] = -sprite[axis + 2];
                }
                sprite[axis] = p;
            }
        }
        x
    }

    /// Pairwise distances at collision time for the step from `(s, a)`.
    pub fn proximities(&self, s: &[f64], a: &[f64]) -> Result<Vec<PairProximity>> {
        self.check(s, a)?;
        let x = self.integrate(s, a);
        let n = self.config.num_sprites;
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (x[4 * j] - x[4 * i], x[4 * j + 1] - x[4 * i + 1]);
                let (dvx, dvy) = (x[4 * j + 2] - x[4 * i + 2], x[4 * j + 3] - x[4 * i + 3]);
                out.push(PairProximity {
                    i,
                    j,
                    distance: dx.hypot(dy),
                    closing: dx * dvx + dy * dvy < 0.0,
                });
            }
        }
        Ok(out)
    }

    /// Uniform reset: positions in the safe box, velocities in
    /// `[-max_speed/2, max_speed/2]` per axis.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let c = &self.config;
        let (lo, hi) = (c.sprite_radius, 1.0 - c.sprite_radius);
        let half = c.max_speed / 2.0;
        let mut s = Vec::with_capacity(4 * c.num_sprites);
        for _ in 0..c.num_sprites {
            s.push(rng.random_range(lo..hi));
            s.push(rng.random_range(lo..hi));
            s.push(rng.random_range(-half..half));
            s.push(rng.random_range(-half..half));
        }
        s
    }
}

impl MaskedDynamics for BouncingBall {
    fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, LocalMask)> {
        self.check(s, a)?;
        let n = self.config.num_sprites;
        let action_row = n;
        let mut deps: Vec<u64> = (0..n).map(|i| 1u64 << i).collect();
        deps[0] |= 1 << action_row;

        let mut x = self.integrate(s, a);
        let thr = self.config.collision_distance();
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (x[4 * j] - x[4 * i], x[4 * j + 1] - x[4 * i + 1]);
                let dist2 = dx * dx + dy * dy;
                if dist2 > thr * thr || dist2 == 0.0 {
                    continue;
                }
                let (dvx, dvy) = (x[4 * j + 2] - x[4 * i + 2], x[4 * j + 3] - x[4 * i + 3]);
                if dx * dvx + dy * dvy >= 0.0 {
                    continue;
                }
                let dist = dist2.sqrt();
                let (nx, ny) = (dx / dist, dy / dist);
                // exchange the normal velocity components
                let dv = (x[4 * i + 2] - x[4 * j + 2]) * nx + (x[4 * i + 3] - x[4 * j + 3]) * ny;
                x[4 * i + 2] -= dv * nx;
                x[4 * i + 3] -= dv * ny;
                x[4 * j + 2] += dv * nx;
                x[4 * j + 3] += dv * ny;
                let merged = deps[i] | deps[j];
                deps[i] = merged;
                deps[j] = merged;
            }
        }
        for sprite in x.chunks_exact_mut(4) {
            self.clip_speed(&mut sprite[2..4]);
        }

        let mut mask = LocalMask::empty(n, 1);
        for (col, &d) in deps.iter().enumerate() {
            for row in 0..=n {
                if d >> row & 1 == 1 {
                    mask.set(row, col, true);
                }
            }
        }
        Ok((x, mask))
    }
}

impl Environment for BouncingBall {
    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.sample_state(rng)
    }

    fn random_action(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `1/N` per placed sprite.
    PlaceNPartial,
    /// `1` only when all `N` sprites are placed.
    PlaceNSparse,
}

/// Place-N: move sprites `0..N` to their targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    pub targets: Vec<[f64; 2]>,
    pub tolerance: f64,
    /// End the episode once the full reward is collected.
    #[serde(default)]
    pub terminate_on_success: bool,
}

impl TaskSpec {
    pub fn place_n(kind: TaskKind, n: usize) -> Result<Self> {
        let targets = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];
        if n == 0 || n > targets.len() {
            return Err(Error::InvalidConfig(format!(
                "place-{n} needs 1..=4 targets"
            )));
        }
        Ok(TaskSpec {
            kind,
            n,
            targets: targets[..n].to_vec(),
            tolerance: 0.1,
            terminate_on_success: false,
        })
    }

    pub fn validate(&self, num_sprites: usize) -> Result<()> {
        if self.n == 0 || self.n > num_sprites || self.targets.len() != self.n {
            return Err(Error::InvalidConfig(
                "task needs 1 <= N <= num_sprites and one target per sprite".into(),
            ));
        }
        if self
            .targets
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidConfig(
                "targets must lie in the canvas".into(),
            ));
        }
        Ok(())
    }

    pub fn placed(&self, s: &[f64]) -> usize {
        self.targets
            .iter()
            .enumerate()
            .filter(|(i, t)| {
                let (x, y) = (s[4 * i], s[4 * i + 1]);
                (x - t[0]).hypot(y - t[1]) <= self.tolerance
            })
            .count()
    }

    pub fn reward(&self, s_next: &[f64]) -> f64 {
        let placed = self.placed(s_next);
        match self.kind {
            TaskKind::PlaceNPartial => placed as f64 / self.n as f64,
            TaskKind::PlaceNSparse => (placed == self.n) as u8 as f64,
        }
    }
}

impl RewardFn for TaskSpec {
    fn relabel(&self, _s: &[f64], _a: &[f64], s_next: &[f64]) -> (f64, bool) {
        let r = self.reward(s_next);
        (
            r,
            self.terminate_on_success && self.placed(s_next) == self.n,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{component_block_max, finite_difference_jacobian, mask_agreement};
    use crate::factored::components;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env() -> BouncingBall {
        BouncingBall::new(BouncingBallConfig::default()).unwrap()
    }

    fn separated() -> Vec<f64> {
        vec![
            0.2, 0.2, 0.0, 0.0, //
            0.8, 0.2, 0.0, 0.0, //
            0.2, 0.8, 0.0, 0.0, //
            0.8, 0.8, 0.0, 0.0,
        ]
    }

    #[test]
    fn separated_sprites_are_factorized() {
        let env = env();
        let (_, mask) = env.step(&separated(), &[0.0, 0.0]).unwrap();
        let mut expected = LocalMask::identity(4, 1);
        expected.set(4, 0, true);
        assert_eq!(mask, expected);
        assert_eq!(components(&mask).n_blocks(), 4);
    }

    #[test]
    fn colliding_pair_is_coupled_and_matches_jacobian() {
        let env = env();
        let mut s = separated();
        // sprites 1 and 2 overlap and approach each other
        s[4..8].copy_from_slice(&[0.45, 0.5, 0.01, 0.0]);
        s[8..12].copy_from_slice(&[0.56, 0.51, -0.01, 0.0]);
        let (_, mask) = env.step(&s, &[0.0, 0.0]).unwrap();
        let p = components(&mask);
        assert_eq!(p.n_blocks(), 3);
        assert_eq!(p.block_of(1), p.block_of(2));
        assert!(mask.get(1, 2) && mask.get(2, 1));
        assert!(!mask.get(4, 1));

        let jac = finite_difference_jacobian(&env, &s, &[0.0, 0.0], 1e-6).unwrap();
        let mags = component_block_max(env.space(), &jac);
        let (agree, decided) = mask_agreement(&mask, &mags, 1e-9, 1e-7);
        assert_eq!(decided, mask.entries().len());
        assert_eq!(agree, decided);
    }

    #[test]
    fn place_n_rewards() {
        let mut s = separated();
        let task = TaskSpec::place_n(TaskKind::PlaceNPartial, 4).unwrap();
        for (i, t) in task.targets.iter().enumerate() {
            s[4 * i] = t[0];
            s[4 * i + 1] = t[1];
        }
        assert_eq!(task.reward(&s), 1.0);
        for i in 1..4 {
            s[4 * i] += 0.3;
        }
        assert_eq!(task.reward(&s), 0.25);
        let sparse = TaskSpec {
            kind: TaskKind::PlaceNSparse,
            ..task.clone()
        };
        assert_eq!(sparse.reward(&s), 0.0);
        assert_eq!(task.relabel(&s, &[0.0, 0.0], &s), (0.25, false));
    }

    #[test]
    fn step_is_deterministic_and_bounded() {
        let env = env();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = env.config().clone();
        for _ in 0..2000 {
            let s = env.sample_state(&mut rng);
            let a = env.random_action(&mut rng);
            let (x1, m1) = env.step(&s, &a).unwrap();
            let (x2, m2) = env.step(&s, &a).unwrap();
            assert_eq!(m1, m2);
            assert!(x1.iter().zip(&x2).all(|(p, q)| p.to_bits() == q.to_bits()));
            let mut total = 0.0;
            for sp in x1.chunks_exact(4) {
                assert!(sp[0] >= c.sprite_radius && sp[0] <= 1.0 - c.sprite_radius);
                assert!(sp[1] >= c.sprite_radius && sp[1] <= 1.0 - c.sprite_radius);
                let v = sp[2].hypot(sp[3]);
                assert!(v <= c.max_speed * (1.0 + 1e-12));
                total += v;
            }
            assert!(total <= c.num_sprites as f64 * c.max_speed * (1.0 + 1e-12));
        }
    }

    #[test]
    fn invalid_inputs() {
        let env = env();
        assert!(matches!(
            env.step(&separated(), &[0.0]),
            Err(Error::Dimension { .. })
        ));
        let bad = BouncingBallConfig {
            num_sprites: 0,
            ..Default::default()
        };
        assert!(BouncingBall::new(bad).is_err());
    }
}

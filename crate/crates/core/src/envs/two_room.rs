//! A corridor split into an icy room and a normal room.
//!
//! State components: `motion = (x, vx)` and `ground` (a dryness level in
//! `[0, 1]`); one action component pushes along `x`. Within either room the
//! ground evolves independently of motion, but the room an agent stands in
//! selects both the friction and the drying rate, so over the whole
//! corridor motion and ground are coupled.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, MaskedDynamics};
use crate::factored::{check_len, Component};
use crate::{Error, FactoredSpace, LocalMask, Result};

pub const MOTION: usize = 0;
pub const GROUND: usize = 1;
pub const PUSH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoRoomConfig {
    /// Positions below the boundary are in the icy room.
    pub room_boundary: f64,
    pub width: f64,
    pub friction_normal: f64,
    pub friction_icy: f64,
    pub drying_normal: f64,
    pub drying_icy: f64,
    pub action_gain: f64,
}

impl Default for TwoRoomConfig {
    fn default() -> Self {
        TwoRoomConfig {
            room_boundary: 1.0,
            width: 2.0,
            friction_normal: 0.9,
            friction_icy: 0.5,
            drying_normal: 0.2,
            drying_icy: 0.02,
            action_gain: 0.05,
        }
    }
}

impl TwoRoomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.friction_icy
            && self.friction_icy < self.friction_normal
            && self.friction_normal <= 1.0)
        {
            return Err(Error::InvalidConfig(
                "need 0 < friction_icy < friction_normal <= 1".into(),
            ));
        }
        if !(0.0 < self.room_boundary && self.room_boundary < self.width) {
            return Err(Error::InvalidConfig(
                "room_boundary must lie inside the corridor".into(),
            ));
        }
        if ![self.drying_normal, self.drying_icy]
            .iter()
            .all(|r| (0.0..=1.0).contains(r))
        {
            return Err(Error::InvalidConfig(
                "drying rates must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TwoRoom {
    config: TwoRoomConfig,
    space: Arc<FactoredSpace>,
}

impl TwoRoom {
    pub fn new(config: TwoRoomConfig) -> Result<Self> {
        config.validate()?;
        let space = FactoredSpace::new(
            vec![Component::new("motion", 2), Component::new("ground", 1)],
            vec![Component::new("push", 1)],
        )?;
        Ok(TwoRoom {
            config,
            space: Arc::new(space),
        })
    }

    pub fn config(&self) -> &TwoRoomConfig {
        &self.config
    }

    pub fn is_icy(&self, x: f64) -> bool {
        x < self.config.room_boundary
    }

    /// The per-room mask: motion depends on motion and the push, ground on
    /// ground only.
    pub fn room_mask() -> LocalMask {
        let mut mask = LocalMask::empty(2, 1);
        mask.set(MOTION, MOTION, true);
        mask.set(PUSH, MOTION, true);
        mask.set(GROUND, GROUND, true);
        mask
    }

    pub fn sample_state_in<R: Rng + ?Sized>(&self, rng: &mut R, icy: bool) -> Vec<f64> {
        let c = &self.config;
        let x = if icy {
            rng.random_range(0.0..c.room_boundary)
        } else {
            rng.random_range(c.room_boundary..c.width)
        };
        vec![x, rng.random_range(-0.05..0.05), rng.random_range(0.0..1.0)]
    }
}

impl MaskedDynamics for TwoRoom {
    fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    fn step(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, LocalMask)> {
        check_len("two-room state", 3, s.len())?;
        check_len("push", 1, a.len())?;
        let c = &self.config;
        let icy = self.is_icy(s[0]);
        let (friction, drying) = if icy {
            (c.friction_icy, c.drying_icy)
        } else {
            (c.friction_normal, c.drying_normal)
        };
        let mut vx = friction * s[1] + c.action_gain * a[0];
        let mut x = s[0] + vx;
        if x < 0.0 {
            x = -x;
            vx = -vx;
        } else if x > c.width {
            x = 2.0 * c.width - x;
            vx = -vx;
        }
        let g = s[2] + drying * (1.0 - s[2]);
        Ok((vec![x, vx, g], Self::room_mask()))
    }
}

impl Environment for TwoRoom {
    fn reset(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let icy = rng.random::<bool>();
        self.sample_state_in(rng, icy)
    }

    fn random_action(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn friction_per_room() {
        let env = TwoRoom::new(TwoRoomConfig::default()).unwrap();
        let (normal, _) = env.step(&[1.05, 1.0, 0.5], &[0.0]).unwrap();
        assert_eq!(normal[1], 0.9);
        let (icy, _) = env.step(&[0.2, 1.0, 0.5], &[0.0]).unwrap();
        assert_eq!(icy[1], 0.5);
    }

    #[test]
    fn ground_ignores_motion_within_a_room() {
        let env = TwoRoom::new(TwoRoomConfig::default()).unwrap();
        let (a, _) = env.step(&[0.2, 0.01, 0.3], &[0.5]).unwrap();
        let (b, _) = env.step(&[0.7, -0.04, 0.3], &[-1.0]).unwrap();
        assert_eq!(a[2], b[2]);
        let (c, _) = env.step(&[1.7, -0.04, 0.3], &[-1.0]).unwrap();
        assert_ne!(a[2], c[2]);
    }

    #[test]
    fn rejects_bad_friction() {
        let cfg = TwoRoomConfig {
            friction_icy: 0.95,
            ..Default::default()
        };
        assert!(TwoRoom::new(cfg).is_err());
    }
}

//! A 2-D point mass pushed by a bounded force.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassShiftSpec {
    pub dt: f64,
    pub mass_source: f64,
    pub mass_target: f64,
    pub friction_source: f64,
    pub friction_target: f64,
    /// Std of Gaussian noise added to the applied force.
    pub action_noise: f64,
    pub horizon: usize,
    pub goal: [f64; 2],
}

impl Default for PointMassShiftSpec {
    fn default() -> Self {
        PointMassShiftSpec {
            dt: 0.1,
            mass_source: 4.0,
            mass_target: 1.0,
            friction_source: 0.1,
            friction_target: 0.1,
            action_noise: 0.0,
            horizon: 50,
            goal: [0.0, 0.0],
        }
    }
}

/// Episodic continuous-control environment.
///
/// `step` is a pure function of `(state, action)` and the draws it takes from
/// `rng`. Horizon truncation is applied by the rollout loop, which flags the
/// last transition of every episode as terminal.
pub trait ContinuousEnv: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> (Vec<f64>, f64, bool);
}

/// State `(x, y, vx, vy)`, action a force in `[-1, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    pub dt: f64,
    pub mass: f64,
    pub friction: f64,
    pub action_noise: f64,
    pub horizon: usize,
    pub goal: [f64; 2],
}

impl PointMassEnv {
    pub fn new(
        dt: f64,
        mass: f64,
        friction: f64,
        action_noise: f64,
        horizon: usize,
        goal: [f64; 2],
    ) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::invalid(format!("mass {mass} must be positive")));
        }
        if !(0.0..1.0).contains(&friction) {
            return Err(Error::invalid(format!(
                "friction {friction} must lie in [0, 1)"
            )));
        }
        if horizon == 0 || !(dt > 0.0) || !(action_noise >= 0.0) {
            return Err(Error::invalid(
                "horizon, dt must be positive and action_noise non-negative",
            ));
        }
        Ok(PointMassEnv {
            dt,
            mass,
            friction,
            action_noise,
            horizon,
            goal,
        })
    }
}

impl ContinuousEnv for PointMassEnv {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![
            self.goal[0] + rng.random_range(-1.0..1.0),
            self.goal[1] + rng.random_range(-1.0..1.0),
            0.0,
            0.0,
        ]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> (Vec<f64>, f64, bool) {
        let mut next = vec![0.0; 4];
        for k in 0..2 {
            let mut f = action[k].clamp(-1.0, 1.0);
            if self.action_noise > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                f += self.action_noise * z;
            }
            let v = (1.0 - self.friction) * state[2 + k] + f / self.mass * self.dt;
            next[2 + k] = v;
            next[k] = state[k] + v * self.dt;
        }
        let reward = -((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        (next, reward, false)
    }
}

pub fn make_pointmass_pair(spec: &PointMassShiftSpec) -> Result<(PointMassEnv, PointMassEnv)> {
    let env = |mass, friction| {
        PointMassEnv::new(
            spec.dt,
            mass,
            friction,
            spec.action_noise,
            spec.horizon,
            spec.goal,
        )
    };
    Ok((
        env(spec.mass_source, spec.friction_source)?,
        env(spec.mass_target, spec.friction_target)?,
    ))
}

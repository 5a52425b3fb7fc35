//! Paired source/target environment families, behaviour policies and dataset generation.

mod gridworld;
mod pointmass;

pub use gridworld::{
    gridworld, make_broken_pair, make_gridworld_pair, BrokenActionSpec, GridworldShiftSpec, MOVES,
};
pub use pointmass::{make_pointmass_pair, ContinuousEnv, PointMassEnv, PointMassShiftSpec};

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain, Point, Space, Transition};
use crate::mdp::{self, DatasetMeta, TabularMDP, TabularPolicy};
use crate::par::{self, Execution};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MEDIUM_EPS: f64 = 0.3;
pub const EXPERT_EPS: f64 = 0.05;
/// Upper end of the per-state (tabular) or per-episode (continuous) noise range of replay mixtures.
pub const REPLAY_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    #[default]
    Medium,
    MediumReplayMix,
    ExpertMix,
}

impl Quality {
    pub fn name(self) -> &'static str {
        match self {
            Quality::Medium => "medium",
            Quality::MediumReplayMix => "medium_replay_mix",
            Quality::ExpertMix => "expert_mix",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Quality::Medium),
            "medium_replay_mix" => Ok(Quality::MediumReplayMix),
            "expert_mix" => Ok(Quality::ExpertMix),
            other => Err(Error::invalid(format!(
                "unknown behaviour quality `{other}`"
            ))),
        }
    }
}

/// Per-state exploration rates of the tabular behaviour for `quality`.
pub fn behavior_epsilons(n_states: usize, quality: Quality, seed: u64) -> Vec<f64> {
    let mut rng = rng::seeded(rng::derive_seed(seed, "behavior"));
    (0..n_states)
        .map(|_| match quality {
            Quality::Medium => MEDIUM_EPS,
            Quality::ExpertMix => {
                if rng.random_bool(0.5) {
                    EXPERT_EPS
                } else {
                    MEDIUM_EPS
                }
            }
            Quality::MediumReplayMix => rng.random_range(MEDIUM_EPS..REPLAY_MAX),
        })
        .collect()
}

/// Epsilon-greedy over the exact optimal Q of `mdp`.
pub fn make_tabular_behavior(mdp: &TabularMDP, quality: Quality, seed: u64) -> TabularPolicy {
    let q = mdp::value_iteration(mdp, 1e-10);
    TabularPolicy::epsilon_greedy(&q, &behavior_epsilons(mdp.n_states, quality, seed))
}

/// Proportional-derivative controller toward the goal with Gaussian action noise.
///
/// The commanded acceleration is converted to a force with the controller's
/// own `mass`, so a controller tuned for one domain over- or under-shoots in
/// the other.
#[derive(Debug, Clone, PartialEq)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
    pub mass: f64,
    pub goal: [f64; 2],
    /// Noise std is drawn uniformly from this range once per episode.
    pub noise: (f64, f64),
}

impl PdController {
    pub fn for_env(env: &PointMassEnv, quality: Quality) -> Self {
        let noise = match quality {
            Quality::Medium => (MEDIUM_EPS, MEDIUM_EPS),
            Quality::ExpertMix => (EXPERT_EPS, EXPERT_EPS),
            Quality::MediumReplayMix => (MEDIUM_EPS, REPLAY_MAX),
        };
        PdController {
            kp: 1.0,
            kd: 1.5,
            mass: env.mass,
            goal: env.goal,
            noise,
        }
    }

    pub fn episode_noise(&self, rng: &mut Rng) -> f64 {
        if self.noise.1 > self.noise.0 {
            rng.random_range(self.noise.0..self.noise.1)
        } else {
            self.noise.0
        }
    }

    pub fn act(&self, state: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
        (0..2)
            .map(|k| {
                let acc = self.kp * (self.goal[k] - state[k]) - self.kd * state[2 + k];
                let z: f64 = StandardNormal.sample(rng);
                (self.mass * acc + noise * z).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

/// Either kind of environment.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Tabular(TabularMDP),
    Continuous(PointMassEnv),
}

impl Env {
    pub fn space(&self) -> Space {
        match self {
            Env::Tabular(m) => m.space(),
            Env::Continuous(e) => Space::Continuous {
                state_dim: e.state_dim(),
                action_dim: e.action_dim(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    Tabular(TabularPolicy),
    Continuous(PdController),
}

pub fn make_behavior_policy(env: &Env, quality: Quality, seed: u64) -> Behavior {
    match env {
        Env::Tabular(m) => Behavior::Tabular(make_tabular_behavior(m, quality, seed)),
        Env::Continuous(e) => Behavior::Continuous(PdController::for_env(e, quality)),
    }
}

/// One episode of `env` under `act`, truncated at the horizon; the final
/// transition is flagged terminal.
pub fn rollout_episode(
    env: &dyn ContinuousEnv,
    mut act: impl FnMut(&[f64], &mut Rng) -> Vec<f64>,
    rng: &mut Rng,
) -> Vec<Transition> {
    let mut s = env.reset(rng);
    let horizon = env.horizon();
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let a = act(&s, rng);
        let (s2, r, done) = env.step(&s, &a, rng);
        let terminal = done || t + 1 == horizon;
        out.push(Transition {
            state: Point::Vector(s),
            action: Point::Vector(a),
            reward: r,
            next_state: Point::Vector(s2.clone()),
            terminal,
        });
        if terminal {
            break;
        }
        s = s2;
    }
    out
}

/// Roll out the controller in episodes drawn from independent RNG streams.
pub fn sample_continuous_dataset(
    env: &PointMassEnv,
    controller: &PdController,
    n_transitions: usize,
    seed: u64,
    meta: &DatasetMeta,
    exec: Execution,
) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::invalid("n_transitions must be at least 1"));
    }
    let n_episodes = n_transitions.div_ceil(env.horizon);
    let episodes = par::map_indexed(n_episodes, exec, |ep| {
        let mut rng = rng::stream(seed, ep as u64);
        let noise = controller.episode_noise(&mut rng);
        rollout_episode(env, |s, r| controller.act(s, noise, r), &mut rng)
    });
    let mut transitions: Vec<Transition> = episodes.into_iter().flatten().collect();
    transitions.truncate(n_transitions);
    Dataset::new(
        transitions,
        meta.domain,
        meta.env_id.clone(),
        meta.behavior_id.clone(),
        seed,
        Env::Continuous(env.clone()).space(),
    )
}

/// A named environment family with its shift parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum Family {
    #[serde(rename = "gridworld/slip")]
    Slip(GridworldShiftSpec),
    #[serde(rename = "gridworld/broken")]
    Broken(BrokenActionSpec),
    #[serde(rename = "pointmass/mass")]
    PointMass(PointMassShiftSpec),
}

pub const FAMILY_NAMES: [&str; 3] = ["gridworld/slip", "gridworld/broken", "pointmass/mass"];

impl Family {
    /// Default-parameter family by name. A bare `gridworld` or `pointmass`
    /// selects the first family of that kind.
    pub fn by_name(name: &str) -> Result<Family> {
        match name {
            "gridworld/slip" | "gridworld" | "slip" => Ok(Family::Slip(Default::default())),
            "gridworld/broken" | "broken" => Ok(Family::Broken(Default::default())),
            "pointmass/mass" | "pointmass" | "mass" => Ok(Family::PointMass(Default::default())),
            other => Err(Error::invalid(format!(
                "unknown family `{other}`; expected one of {}",
                FAMILY_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Slip(_) => FAMILY_NAMES[0],
            Family::Broken(_) => FAMILY_NAMES[1],
            Family::PointMass(_) => FAMILY_NAMES[2],
        }
    }

    pub fn is_tabular(&self) -> bool {
        !matches!(self, Family::PointMass(_))
    }

    /// `(source, target)` environments.
    pub fn pair(&self) -> Result<(Env, Env)> {
        Ok(match self {
            Family::Slip(s) => {
                let (a, b) = make_gridworld_pair(s)?;
                (Env::Tabular(a), Env::Tabular(b))
            }
            Family::Broken(s) => {
                let (a, b) = make_broken_pair(s)?;
                (Env::Tabular(a), Env::Tabular(b))
            }
            Family::PointMass(s) => {
                let (a, b) = make_pointmass_pair(s)?;
                (Env::Continuous(a), Env::Continuous(b))
            }
        })
    }

    pub fn env(&self, domain: Domain) -> Result<Env> {
        let (src, tar) = self.pair()?;
        Ok(match domain {
            Domain::Source => src,
            Domain::Target => tar,
        })
    }

    /// Episode length used for tabular sampling and evaluation.
    pub fn horizon(&self) -> usize {
        match self {
            Family::Slip(_) | Family::Broken(_) => 50,
            Family::PointMass(s) => s.horizon,
        }
    }

    /// Behaviour dataset of `n` transitions in `domain`.
    pub fn generate(
        &self,
        domain: Domain,
        quality: Quality,
        n: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Dataset> {
        let meta = DatasetMeta {
            domain,
            env_id: self.name().to_string(),
            behavior_id: quality.name().to_string(),
        };
        match (
            self.env(domain)?,
            make_behavior_policy(&self.env(domain)?, quality, seed),
        ) {
            (Env::Tabular(m), Behavior::Tabular(pi)) => {
                mdp::sample_dataset(&m, &pi, n, self.horizon(), seed, &meta)
            }
            (Env::Continuous(e), Behavior::Continuous(pd)) => {
                sample_continuous_dataset(&e, &pd, n, seed, &meta, exec)
            }
            _ => unreachable!("behaviour kind always matches the environment"),
        }
    }
}

//! Seedable toy environments with analytic dynamics.
//!
//! | name          | obs                      | action          | reward                                 | steps |
//! |---------------|--------------------------|-----------------|----------------------------------------|-------|
//! | `pendulum`    | `(cos θ, sin θ, ω)`      | torque `[-2,2]` | `-(θ̃² + 0.1ω² + 0.001u²)`, θ̃ = θ−π    | 200   |
//! | `point_reach` | `(x, y, goal_x, goal_y)` | velocity `[-1,1]²` | 1 on entering the goal disc, else 0 | 100   |
//! | `chain`       | one-hot of 5 states      | sign in `[-1,1]`  | 1 for acting in the rightmost state  | 20    |
//!
//! Out-of-range actions are clipped (and counted); NaN actions are rejected.

pub mod chain;
mod pendulum;
mod point_reach;

use std::fmt;
use std::str::FromStr;

pub use chain::ChainMdp;
pub use pendulum::Pendulum;
pub use point_reach::PointReach;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub act_low: Vec<f64>,
    pub act_high: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    /// Maps a normalized action in `[-1, 1]` to environment units.
    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.act_low.iter().zip(&self.act_high))
            .map(|(&v, (&lo, &hi))| lo + (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo))
            .collect()
    }

    /// Maps an environment action to `[-1, 1]`.
    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.act_low.iter().zip(&self.act_high))
            .map(|(&v, (&lo, &hi))| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0))
            .collect()
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.act_low.iter().zip(&self.act_high))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Call counters, used by tests and ownership audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EnvCounters {
    pub resets: u64,
    pub steps: u64,
    pub clipped_actions: u64,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    fn counters(&self) -> EnvCounters;
    fn name(&self) -> EnvName;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvName {
    Pendulum,
    PointReach,
    Chain,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Pendulum => "pendulum",
            EnvName::PointReach => "point_reach",
            EnvName::Chain => "chain",
        }
    }

    pub fn make(self) -> Box<dyn Env> {
        match self {
            EnvName::Pendulum => Box::new(Pendulum::new()),
            EnvName::PointReach => Box::new(PointReach::new()),
            EnvName::Chain => Box::new(ChainMdp::new()),
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvName::Pendulum),
            "point_reach" => Ok(EnvName::PointReach),
            "chain" => Ok(EnvName::Chain),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

/// Validates an action and clips it into bounds, bumping `counters` when
/// clipping changed anything.
pub(crate) fn prepare_action(
    spec: &EnvSpec,
    action: &[f64],
    counters: &mut EnvCounters,
) -> Result<Vec<f64>> {
    if action.len() != spec.act_dim {
        return Err(Error::ActionDim {
            expected: spec.act_dim,
            found: action.len(),
        });
    }
    if action.iter().any(|v| v.is_nan()) {
        return Err(Error::NanAction);
    }
    let clipped = spec.clip_action(action);
    if clipped != action {
        counters.clipped_actions += 1;
    }
    Ok(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn all() -> Vec<EnvName> {
        vec![EnvName::Pendulum, EnvName::PointReach, EnvName::Chain]
    }

    fn rollout(name: EnvName, seed: u64) -> Vec<(Vec<f64>, f64)> {
        let mut env = name.make();
        let mut r = rng::stream(seed, &[99]);
        let mut out = vec![(env.reset(seed), 0.0)];
        for _ in 0..env.spec().max_episode_steps {
            let a: Vec<f64> = (0..env.spec().act_dim)
                .map(|_| r.gen_range(-1.0..1.0))
                .collect();
            let step = env.step(&a).unwrap();
            let done = step.done();
            out.push((step.observation, step.reward));
            if done {
                break;
            }
        }
        out
    }

    #[test]
    fn same_seed_same_actions_is_bit_identical() {
        for name in all() {
            let a = rollout(name, 3);
            let b = rollout(name, 3);
            assert_eq!(format!("{a:?}"), format!("{b:?}"), "{name}");
        }
    }

    #[test]
    fn rewards_and_observations_finite_over_full_episodes() {
        for name in all() {
            for seed in 0..10 {
                for (obs, r) in rollout(name, seed) {
                    assert!(r.is_finite() && obs.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    #[test]
    fn nan_action_rejected_and_out_of_range_clipped() {
        for name in all() {
            let mut env = name.make();
            env.reset(0);
            let dim = env.spec().act_dim;
            assert!(matches!(
                env.step(&vec![f64::NAN; dim]),
                Err(Error::NanAction)
            ));
            assert!(matches!(
                env.step(&vec![0.0; dim + 1]),
                Err(Error::ActionDim { .. })
            ));
            env.step(&vec![50.0; dim]).unwrap();
            assert_eq!(env.counters().clipped_actions, 1);
        }
    }

    #[test]
    fn names_round_trip() {
        for name in all() {
            assert_eq!(name.as_str().parse::<EnvName>().unwrap(), name);
        }
        assert!("mujoco".parse::<EnvName>().is_err());
    }

    #[test]
    fn action_normalization_inverts() {
        let spec = Pendulum::new().spec().clone();
        for v in [-2.0, -0.5, 0.0, 1.25, 2.0] {
            let n = spec.normalize_action(&[v]);
            assert!((spec.denormalize_action(&n)[0] - v).abs() < 1e-12);
        }
    }
}

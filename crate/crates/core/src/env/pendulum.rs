use std::f64::consts::PI;

use rand::Rng;

use super::{prepare_action, Env, EnvCounters, EnvName, EnvSpec, StepResult};
use crate::{rng, Result};

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const DT: f64 = 0.05;
pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Torque-limited pendulum swing-up.
///
/// θ = 0 is the hanging rest position and θ = π is upright. One tick of
/// explicit Euler with `dt = 0.05`:
///
/// ```text
/// ω' = ω + dt · (−(g/l)·sin θ + u/(m l²))      clipped to [−8, 8]
/// θ' = wrap(θ + dt · ω)
/// ```
///
/// The reward is evaluated on the post-step state with θ̃ = wrap(θ' − π).
/// Episodes start at θ ~ U(−π, π), ω ~ U(−1, 1) and are truncated at 200 steps.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    omega: f64,
    t: usize,
    counters: EnvCounters,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 3,
                act_dim: 1,
                act_low: vec![-MAX_TORQUE],
                act_high: vec![MAX_TORQUE],
                max_episode_steps: 200,
            },
            theta: 0.0,
            omega: 0.0,
            t: 0,
            counters: EnvCounters::default(),
        }
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.omega)
    }

    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = wrap_angle(theta);
        self.omega = omega;
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn name(&self) -> EnvName {
        EnvName::Pendulum
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[0x9e4d]);
        self.theta = wrap_angle(r.gen_range(-PI..PI));
        self.omega = r.gen_range(-1.0..1.0);
        self.t = 0;
        self.counters.resets += 1;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let u = prepare_action(&self.spec, action, &mut self.counters)?[0];
        self.counters.steps += 1;
        let alpha = -(GRAVITY / LENGTH) * self.theta.sin() + u / (MASS * LENGTH * LENGTH);
        let omega = (self.omega + DT * alpha).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta = wrap_angle(self.theta + DT * self.omega);
        self.omega = omega;
        self.t += 1;
        let err = wrap_angle(self.theta - PI);
        let reward = -(err * err + 0.1 * self.omega * self.omega + 0.001 * u * u);
        Ok(StepResult {
            observation: self.observation(),
            reward,
            terminated: false,
            truncated: self.t >= self.spec.max_episode_steps,
        })
    }

    fn counters(&self) -> EnvCounters {
        self.counters
    }
}

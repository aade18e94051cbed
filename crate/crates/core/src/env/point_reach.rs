use std::f64::consts::PI;

use rand::Rng;

use super::{prepare_action, Env, EnvCounters, EnvName, EnvSpec, StepResult};
use crate::{rng, Result};

pub const GOAL_RADIUS: f64 = 0.1;
const DT: f64 = 0.1;

/// 2-D point mass steered by velocity commands.
///
/// `p' = p + 0.1 · a` with `a ∈ [−1, 1]²`. The agent starts at the origin and
/// the goal is placed at a seeded angle and a distance in `[0.5, 1.0)`.
/// Reaching within 0.1 of the goal pays 1 and terminates; every other step
/// pays 0. Episodes are truncated at 100 steps.
#[derive(Clone, Debug)]
pub struct PointReach {
    spec: EnvSpec,
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    counters: EnvCounters,
}

impl Default for PointReach {
    fn default() -> Self {
        Self::new()
    }
}

impl PointReach {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: 4,
                act_dim: 2,
                act_low: vec![-1.0, -1.0],
                act_high: vec![1.0, 1.0],
                max_episode_steps: 100,
            },
            pos: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            counters: EnvCounters::default(),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn set_position(&mut self, pos: [f64; 2]) {
        self.pos = pos;
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]]
    }
}

impl Env for PointReach {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn name(&self) -> EnvName {
        EnvName::PointReach
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[0x907e]);
        let angle = r.gen_range(-PI..PI);
        let dist = r.gen_range(0.5..1.0);
        self.goal = [dist * angle.cos(), dist * angle.sin()];
        self.pos = [0.0; 2];
        self.t = 0;
        self.counters.resets += 1;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = prepare_action(&self.spec, action, &mut self.counters)?;
        self.counters.steps += 1;
        self.pos[0] += DT * a[0];
        self.pos[1] += DT * a[1];
        self.t += 1;
        let d =
            ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt();
        let reached = d <= GOAL_RADIUS;
        Ok(StepResult {
            observation: self.observation(),
            reward: if reached { 1.0 } else { 0.0 },
            terminated: reached,
            truncated: !reached && self.t >= self.spec.max_episode_steps,
        })
    }

    fn counters(&self) -> EnvCounters {
        self.counters
    }
}

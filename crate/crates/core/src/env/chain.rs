use super::{prepare_action, Env, EnvCounters, EnvName, EnvSpec, StepResult};
use crate::Result;

pub const CHAIN_LEN: usize = 5;

/// Deterministic five-state chain.
///
/// Observations are one-hot state indicators; every episode starts in state 0.
/// In states 0..=3 a positive action moves right and a non-positive one moves
/// left (bounded at 0), paying nothing. Acting in state 4 pays 1 and ends the
/// episode. Under discount γ the optimal value of state `i` is `γ^(4−i)`.
#[derive(Clone, Debug)]
pub struct ChainMdp {
    spec: EnvSpec,
    state: usize,
    t: usize,
    counters: EnvCounters,
}

impl Default for ChainMdp {
    fn default() -> Self {
        Self::new()
    }
}

impl ChainMdp {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                obs_dim: CHAIN_LEN,
                act_dim: 1,
                act_low: vec![-1.0],
                act_high: vec![1.0],
                max_episode_steps: 20,
            },
            state: 0,
            t: 0,
            counters: EnvCounters::default(),
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, state: usize) {
        self.state = state.min(CHAIN_LEN - 1);
    }

    pub fn one_hot(state: usize) -> Vec<f64> {
        let mut v = vec![0.0; CHAIN_LEN];
        v[state] = 1.0;
        v
    }

    /// Exact optimal values `γ^(4−i)` by value iteration over the chain.
    pub fn optimal_values(gamma: f64) -> Vec<f64> {
        let mut v = vec![0.0; CHAIN_LEN];
        for _ in 0..100 {
            let mut next = v.clone();
            for s in 0..CHAIN_LEN {
                next[s] = if s == CHAIN_LEN - 1 {
                    1.0
                } else {
                    let right = gamma * v[s + 1];
                    let left = gamma * v[s.saturating_sub(1)];
                    right.max(left)
                };
            }
            v = next;
        }
        v
    }
}

impl Env for ChainMdp {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn name(&self) -> EnvName {
        EnvName::Chain
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.state = 0;
        self.t = 0;
        self.counters.resets += 1;
        Self::one_hot(0)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = prepare_action(&self.spec, action, &mut self.counters)?[0];
        self.counters.steps += 1;
        self.t += 1;
        let (reward, terminated) = if self.state == CHAIN_LEN - 1 {
            (1.0, true)
        } else {
            self.state = if a > 0.0 {
                self.state + 1
            } else {
                self.state.saturating_sub(1)
            };
            (0.0, false)
        };
        Ok(StepResult {
            observation: Self::one_hot(self.state),
            reward,
            terminated,
            truncated: !terminated && self.t >= self.spec.max_episode_steps,
        })
    }

    fn counters(&self) -> EnvCounters {
        self.counters
    }
}

//! Fixtures with exact answers, shared by the test suites.

use dodt_autodiff::{Graph, Tensor, Var};
use rand::RngCore;

use crate::env::chain::CHAIN_LEN;
use crate::world_model::{
    Actor, BehaviorConfig, Critic, ImaginedRollout, LatentModel, ValueFn, ValueTarget,
};
use crate::Result;

/// One-hot features over the chain's five states plus an absorbing state
/// entered after collecting the reward.
pub const CHAIN_FEATURES: usize = CHAIN_LEN + 1;

fn chain_one_hot(state: usize) -> Vec<f64> {
    let mut v = vec![0.0; CHAIN_FEATURES];
    v[state] = 1.0;
    v
}

/// Rollout of the always-right policy from every chain state, long enough
/// that every start reaches the absorbing state.
pub fn chain_always_right_rollout(horizon: usize) -> ImaginedRollout {
    let starts: Vec<usize> = (0..CHAIN_LEN).collect();
    let mut states = starts.clone();
    let mut features = vec![states
        .iter()
        .flat_map(|&s| chain_one_hot(s))
        .collect::<Vec<_>>()];
    let mut rewards = Vec::new();
    let mut actions = Vec::new();
    for _ in 0..horizon {
        let mut r = Vec::with_capacity(states.len());
        for s in &mut states {
            r.push(if *s == CHAIN_LEN - 1 { 1.0 } else { 0.0 });
            *s = (*s + 1).min(CHAIN_LEN);
        }
        rewards.push(r);
        actions.push(vec![1.0; states.len()]);
        features.push(states.iter().flat_map(|&s| chain_one_hot(s)).collect());
    }
    ImaginedRollout {
        batch: starts.len(),
        feature_dim: CHAIN_FEATURES,
        values: vec![vec![0.0; starts.len()]; horizon + 1],
        features,
        actions,
        rewards,
    }
}

/// Trains a fresh value model on the always-right chain rollout and returns
/// the number of updates needed to get every state within `tol` (relative)
/// of `γ^(4−i)`, or `None` if `max_updates` was not enough.
pub fn chain_value_fit(
    seed: u64,
    gamma: f64,
    tol: f64,
    max_updates: usize,
) -> Result<(Option<usize>, Vec<f64>)> {
    let cfg = BehaviorConfig {
        hidden: 32,
        critic_lr: 3e-3,
        ..BehaviorConfig::default()
    };
    let mut rng = crate::rng::stream(seed, &[0xc4a1]);
    let mut critic = Critic::new(&cfg, CHAIN_FEATURES, &mut rng);
    let rollout = chain_always_right_rollout(CHAIN_LEN + 1);
    let exact: Vec<f64> = (0..CHAIN_LEN)
        .map(|i| gamma.powi((CHAIN_LEN - 1 - i) as i32))
        .collect();
    let start = rollout.feature_tensor(0);
    let mut values = critic.values(&start)?;
    for step in 1..=max_updates {
        critic.update(&rollout, gamma, ValueTarget::Td)?;
        values = critic.values(&start)?;
        let ok = values
            .iter()
            .zip(&exact)
            .all(|(v, e)| ((v - e) / e).abs() <= tol);
        if ok {
            return Ok((Some(step), values));
        }
    }
    Ok((None, values))
}

/// Continuous relaxation of the chain: position `x` moves by the action and
/// the exact value of the always-right policy is `γ^(4−x)`.
pub struct ChainRelaxation {
    pub gamma: f64,
}

impl LatentModel for ChainRelaxation {
    fn feature_dim(&self) -> usize {
        1
    }

    fn imagine_step(
        &self,
        g: &mut Graph,
        features: Var,
        action: Var,
        _rng: &mut dyn RngCore,
    ) -> Result<(Var, Var)> {
        let next = g.add(features, action)?;
        let n = g.shape(features)[0];
        let reward = g.constant(&Tensor::zeros(&[n, 1]));
        Ok((next, reward))
    }
}

impl ValueFn for ChainRelaxation {
    fn value(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let x = g.add_scalar(features, -((CHAIN_LEN - 1) as f64));
        let x = g.scale(x, -self.gamma.ln());
        Ok(g.exp(x))
    }
}

/// Chain-relaxation starts, one per discrete state.
pub fn chain_starts() -> Tensor {
    Tensor::new(
        vec![CHAIN_LEN, 1],
        (0..CHAIN_LEN).map(|i| i as f64).collect(),
    )
    .unwrap()
}

/// Eval-mode actions of `actor` in every chain state.
pub fn chain_actions(actor: &Actor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(&chain_starts());
    let a = actor.mode(&mut g, x)?;
    Ok(g.value(a).to_vec())
}

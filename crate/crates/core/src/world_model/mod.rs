//! Latent world model and behavior learning in imagination.
//!
//! The latent state is split into a deterministic recurrent part (`deter`)
//! and a diagonal-Gaussian stochastic part (`stoch`). Features fed to every
//! head are `concat(deter, stoch)`.
//!
//! Reward alignment: the posterior state `s_{t+1}` is computed from
//! `(s_t, a_t, o_{t+1})` and the reward head applied to `s_{t+1}` predicts
//! `r_t`.

mod behavior;
mod dreamer;
mod rssm;

pub use behavior::{
    imagine, Actor, ActorWeighting, Critic, GraphRollout, ImaginedRollout, LatentModel, ValueFn,
    ValueTarget,
};
pub use dreamer::{ActMode, Dreamer, DreamerConfig, TrainStats};
pub use rssm::{Dist, LatentState, LatentVars, WmLosses, WorldModel};

use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModelConfig {
    /// Size of the recurrent deterministic state.
    pub deter: usize,
    /// Size of the stochastic state.
    pub stoch: usize,
    pub hidden: usize,
    /// Training window length `L`.
    pub seq_len: usize,
    /// Windows per update `B`.
    pub batch: usize,
    pub lr: f64,
    pub free_nats: f64,
    pub kl_scale: f64,
    pub min_std: f64,
    pub grad_clip: f64,
    /// Multiplier applied to environment rewards before the world model sees
    /// them.
    pub reward_scale: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            deter: 64,
            stoch: 16,
            hidden: 64,
            seq_len: 32,
            batch: 16,
            lr: 1e-3,
            free_nats: 1.0,
            kl_scale: 1.0,
            min_std: 0.1,
            grad_clip: 100.0,
            reward_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorConfig {
    /// Imagination horizon `H`.
    pub horizon: usize,
    pub gamma: f64,
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub actor_min_std: f64,
    pub explore_noise: f64,
    /// Number of posterior states used as imagination starts per update.
    pub imagine_starts: usize,
    pub value_target: ValueTarget,
    pub actor_weighting: ActorWeighting,
    pub grad_clip: f64,
    pub plain_sgd: bool,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            hidden: 64,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            actor_min_std: 0.1,
            explore_noise: 0.3,
            imagine_starts: 64,
            value_target: ValueTarget::Td,
            actor_weighting: ActorWeighting::Discounted,
            grad_clip: 100.0,
            plain_sgd: false,
        }
    }
}

impl std::str::FromStr for ValueTarget {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "td" => Ok(ValueTarget::Td),
            "alg2" => Ok(ValueTarget::Alg2),
            other => Err(Error::InvalidArgument(format!(
                "unknown value target `{other}`"
            ))),
        }
    }
}

impl std::str::FromStr for ActorWeighting {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "discounted" => Ok(ActorWeighting::Discounted),
            "uniform" => Ok(ActorWeighting::Uniform),
            other => Err(Error::InvalidArgument(format!(
                "unknown actor weighting `{other}`"
            ))),
        }
    }
}

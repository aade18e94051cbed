//! Online decision transformer: a causal transformer over interleaved
//! `(return-to-go, observation, action)` tokens with a Gaussian action head.

mod model;
mod rollout;

pub use model::{OdtLosses, OdtOutput, Transformer};
pub(crate) use rollout::summarize;
pub use rollout::{evaluate, rollout_online, EvalResult, Rollout};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OdtConfig {
    /// Context length `K` in timesteps.
    pub context_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden size of the feed-forward block as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Rows of the timestep embedding table; larger timesteps share the last row.
    pub max_timestep: usize,
    /// Return-to-go values are divided by this before embedding.
    pub rtg_scale: f64,
    /// Initial return-to-go for exploration rollouts.
    pub t_online: f64,
    /// Initial return-to-go for evaluation rollouts.
    pub eval_rtg: f64,
    /// Gradient iterations per round `I`.
    pub iterations: usize,
    pub batch: usize,
    pub entropy_coef: f64,
    pub lr: f64,
    pub grad_clip: f64,
    /// Discount used when computing return-to-go for training windows.
    pub rtg_gamma: f64,
    pub plain_sgd: bool,
}

impl Default for OdtConfig {
    fn default() -> Self {
        Self {
            context_len: 20,
            width: 64,
            layers: 3,
            heads: 4,
            mlp_ratio: 4,
            max_timestep: 1000,
            rtg_scale: 100.0,
            t_online: -150.0,
            eval_rtg: -150.0,
            iterations: 10,
            batch: 16,
            entropy_coef: 0.01,
            lr: 3e-4,
            grad_clip: 0.25,
            rtg_gamma: 1.0,
            plain_sgd: false,
        }
    }
}

impl OdtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.context_len == 0 {
            return bad("context_len must be at least 1");
        }
        if self.width == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("width, layers, heads and mlp_ratio must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if self.max_timestep == 0 {
            return bad("max_timestep must be positive");
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return bad("rtg_scale must be positive");
        }
        if !self.t_online.is_finite() || !self.eval_rtg.is_finite() {
            return bad("t_online and eval_rtg must be finite");
        }
        if self.entropy_coef.is_nan() || self.entropy_coef < 0.0 {
            return bad("entropy_coef must be non-negative");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.rtg_gamma > 0.0 && self.rtg_gamma <= 1.0) {
            return bad("rtg_gamma must lie in (0, 1]");
        }
        Ok(())
    }
}

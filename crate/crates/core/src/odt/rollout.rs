use rand::Rng;
use rand_distr::StandardNormal;

use super::Transformer;
use crate::env::Env;
use crate::replay::{Source, Trajectory};
use crate::tokens::TokenSequence;
use crate::world_model::ActMode;
use crate::{rng, Result};

/// A finished online episode and the return-to-go used at each step
/// (`T + 1` values; the last one is what remained after the final reward).
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub rtg: Vec<f64>,
}

/// Runs one episode from `env.reset(seed)` conditioned on `g_init`.
///
/// After every step the conditioning return is reduced by the observed
/// reward, `g_{t+1} = g_t − r_t`. Explore mode samples from the predicted
/// Gaussian; eval mode takes its mean.
pub fn rollout_online<R: Rng>(
    env: &mut dyn Env,
    model: &Transformer,
    g_init: f64,
    mode: ActMode,
    seed: u64,
    rng: &mut R,
) -> Result<Rollout> {
    let spec = env.spec().clone();
    let k = model.cfg.context_len;
    let mut observations = vec![env.reset(seed)];
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut rewards = Vec::new();
    let mut rtg = vec![g_init];
    loop {
        let t = rewards.len();
        let start = (t + 1).saturating_sub(k);
        let mut acts = actions[start..].to_vec();
        acts.push(vec![0.0; spec.act_dim]);
        let steps: Vec<usize> = (start..=t).collect();
        let seq = TokenSequence::left_padded(
            k,
            &rtg[start..=t],
            &observations[start..=t],
            &acts,
            &steps,
        )?;
        let (mean, log_std) = model.predict(&seq)?;
        let action: Vec<f64> = match mode {
            ActMode::Eval => mean,
            ActMode::Explore => mean
                .iter()
                .zip(&log_std)
                .map(|(&m, &s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    (m + s.exp() * z).clamp(-1.0, 1.0)
                })
                .collect(),
        };
        let step = env.step(&spec.denormalize_action(&action))?;
        actions.push(action);
        rewards.push(step.reward);
        rtg.push(rtg[t] - step.reward);
        observations.push(step.observation.clone());
        if step.done() {
            break;
        }
    }
    Ok(Rollout {
        trajectory: Trajectory::new(observations, actions, rewards, Source::Odt)?,
        rtg,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub returns: Vec<f64>,
    pub episodes: Vec<Trajectory>,
}

/// Mean and spread of eval-mode returns over `episodes` rollouts, episode `i`
/// reset with a seed derived from `(seed, i)`.
pub fn evaluate(
    env: &mut dyn Env,
    model: &Transformer,
    eval_rtg: f64,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut trajs = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let ep_seed = rng::derive(seed, &[0xe7a1, i as u64]);
        let mut r = rng::stream(ep_seed, &[]);
        trajs
            .push(rollout_online(env, model, eval_rtg, ActMode::Eval, ep_seed, &mut r)?.trajectory);
    }
    Ok(summarize(trajs))
}

pub(crate) fn summarize(episodes: Vec<Trajectory>) -> EvalResult {
    let returns: Vec<f64> = episodes.iter().map(Trajectory::total_return).collect();
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    EvalResult {
        mean,
        std: var.sqrt(),
        returns,
        episodes,
    }
}

use dodt_autodiff::{Graph, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::behavior::{imagine, Actor, Critic};
use super::rssm::{LatentState, WorldModel};
use super::{BehaviorConfig, WorldModelConfig};
use crate::env::{Env, EnvSpec};
use crate::odt::{summarize, EvalResult};
use crate::replay::{SequenceDataset, Source, Trajectory};
use crate::{rng, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DreamerConfig {
    pub wm: WorldModelConfig,
    pub behavior: BehaviorConfig,
    /// Episodes kept in the sequence dataset.
    pub dataset_capacity: usize,
}

impl Default for DreamerConfig {
    fn default() -> Self {
        Self {
            wm: WorldModelConfig::default(),
            behavior: BehaviorConfig::default(),
            dataset_capacity: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Mean losses over a block of updates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub updates: usize,
    pub recon: f64,
    pub kl: f64,
    pub reward: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
}

/// World model, action model and value model plus the dataset they learn from.
#[derive(Clone, Debug)]
pub struct Dreamer {
    pub cfg: DreamerConfig,
    pub spec: EnvSpec,
    pub wm: WorldModel,
    pub actor: Actor,
    pub critic: Critic,
    pub dataset: SequenceDataset,
    state: Option<LatentState>,
    prev_action: Vec<f64>,
}

impl Dreamer {
    pub fn new(cfg: DreamerConfig, spec: EnvSpec, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0xd7ea]);
        let plain = cfg.behavior.plain_sgd;
        let wm = WorldModel::new(cfg.wm.clone(), spec.obs_dim, spec.act_dim, plain, &mut r);
        let f = wm.feature_size();
        let actor = Actor::new(&cfg.behavior, f, spec.act_dim, &mut r);
        let critic = Critic::new(&cfg.behavior, f, &mut r);
        Self {
            dataset: SequenceDataset::new(cfg.dataset_capacity),
            prev_action: vec![0.0; spec.act_dim],
            state: None,
            cfg,
            spec,
            wm,
            actor,
            critic,
        }
    }

    /// Forgets the recurrent state; call on every environment reset.
    pub fn reset_state(&mut self) {
        self.state = None;
        self.prev_action = vec![0.0; self.spec.act_dim];
    }

    pub fn latent(&self) -> Option<&LatentState> {
        self.state.as_ref()
    }

    /// Filters `obs` into the latent state and picks a normalized action in
    /// `[-1, 1]`.
    pub fn act<R: Rng>(&mut self, obs: &[f64], mode: ActMode, rng: &mut R) -> Result<Vec<f64>> {
        let state = self
            .wm
            .observe(self.state.as_ref(), &self.prev_action, obs, rng)?;
        let mut g = Graph::new();
        let feat = g.constant(&Tensor::new(
            vec![1, self.wm.feature_size()],
            state.features(),
        )?);
        let action = match mode {
            ActMode::Eval => {
                let a = self.actor.mode(&mut g, feat)?;
                g.value(a).to_vec()
            }
            ActMode::Explore => {
                let a = self.actor.sample(&mut g, feat, rng)?;
                let noise = Normal::new(0.0, self.cfg.behavior.explore_noise.max(0.0)).unwrap();
                g.value(a)
                    .iter()
                    .map(|&v| (v + noise.sample(rng)).clamp(-1.0, 1.0))
                    .collect()
            }
        };
        self.state = Some(state);
        self.prev_action = action.clone();
        Ok(action)
    }

    /// Runs one episode from `env.reset(seed)` for at most `max_steps` steps,
    /// adds it to the dataset and returns it.
    pub fn collect_episode<R: Rng>(
        &mut self,
        env: &mut dyn Env,
        seed: u64,
        max_steps: usize,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let traj = self.run_episode(env, seed, max_steps, mode, rng)?;
        self.dataset.push(traj.clone());
        Ok(traj)
    }

    /// Like [`Dreamer::collect_episode`] but leaves the dataset alone.
    pub fn run_episode<R: Rng>(
        &mut self,
        env: &mut dyn Env,
        seed: u64,
        max_steps: usize,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut obs = env.reset(seed);
        self.reset_state();
        let mut observations = vec![obs.clone()];
        let (mut actions, mut rewards) = (Vec::new(), Vec::new());
        while rewards.len() < max_steps {
            let a = self.act(&obs, mode, rng)?;
            let step = env.step(&self.spec.denormalize_action(&a))?;
            actions.push(a);
            rewards.push(step.reward);
            obs = step.observation.clone();
            observations.push(step.observation.clone());
            if step.done() {
                break;
            }
        }
        Trajectory::new(observations, actions, rewards, Source::Dreamer)
    }

    /// Eval-mode returns over `episodes` episodes, reset with seeds derived
    /// from `(seed, i)`. The filter state of an episode in progress is
    /// restored afterwards and nothing is added to the dataset.
    pub fn evaluate(
        &mut self,
        env: &mut dyn Env,
        episodes: usize,
        seed: u64,
    ) -> Result<EvalResult> {
        let saved = (self.state.take(), std::mem::take(&mut self.prev_action));
        let max = env.spec().max_episode_steps;
        let mut trajs = Vec::with_capacity(episodes);
        let mut result = Ok(());
        for i in 0..episodes {
            let ep_seed = rng::derive(seed, &[0xe7a1, i as u64]);
            let mut r = rng::stream(ep_seed, &[]);
            match self.run_episode(env, ep_seed, max, ActMode::Eval, &mut r) {
                Ok(t) => trajs.push(t),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        self.state = saved.0;
        self.prev_action = saved.1;
        result.map(|()| summarize(trajs))
    }

    /// Uniformly random episode used to seed the dataset.
    pub fn random_episode<R: Rng>(
        &mut self,
        env: &mut dyn Env,
        seed: u64,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let mut obs = env.reset(seed);
        let mut observations = vec![obs.clone()];
        let (mut actions, mut rewards) = (Vec::new(), Vec::new());
        loop {
            let a: Vec<f64> = (0..self.spec.act_dim)
                .map(|_| rng.gen_range(-1.0..=1.0))
                .collect();
            let step = env.step(&self.spec.denormalize_action(&a))?;
            actions.push(a);
            rewards.push(step.reward);
            obs.clone_from(&step.observation);
            observations.push(step.observation.clone());
            if step.done() {
                break;
            }
        }
        let traj = Trajectory::new(observations, actions, rewards, Source::Dreamer)?;
        self.dataset.push(traj.clone());
        Ok(traj)
    }

    /// `updates` rounds of dynamics learning followed by behavior learning
    /// in imagination.
    pub fn train<R: Rng>(&mut self, updates: usize, rng: &mut R) -> Result<TrainStats> {
        let mut stats = TrainStats::default();
        let b = &self.cfg.behavior;
        let (gamma, horizon, weighting, target, starts_n) = (
            b.gamma,
            b.horizon,
            b.actor_weighting,
            b.value_target,
            b.imagine_starts,
        );
        for _ in 0..updates {
            let batch = self
                .dataset
                .sample(self.cfg.wm.batch, self.cfg.wm.seq_len, rng)?;
            let (losses, features) = self.wm.train_step(&batch, rng)?;
            let starts = self.wm.pick_starts(&features, starts_n, rng);
            let mut g = Graph::new();
            let rollout = imagine(
                &mut g,
                &self.wm,
                &self.actor,
                &self.critic,
                &starts,
                horizon,
                rng,
            )?;
            let detached = rollout.detach(&g);
            let actor_loss = self.actor.update(&mut g, &rollout, gamma, weighting)?;
            let value_loss = self.critic.update(&detached, gamma, target)?;
            stats.updates += 1;
            stats.recon += losses.recon;
            stats.kl += losses.kl;
            stats.reward += losses.reward;
            stats.actor_loss += actor_loss;
            stats.value_loss += value_loss;
        }
        if stats.updates > 0 {
            let n = stats.updates as f64;
            stats.recon /= n;
            stats.kl /= n;
            stats.reward /= n;
            stats.actor_loss /= n;
            stats.value_loss /= n;
        }
        Ok(stats)
    }

    /// Non-finite-step incidents across all three learners.
    pub fn incidents(&self) -> usize {
        self.wm.skipped_steps + self.actor.skipped_steps + self.critic.skipped_steps
    }

    pub fn params_finite(&self) -> bool {
        self.wm.zeta.all_finite()
            && self.wm.xi.all_finite()
            && self.actor.phi.all_finite()
            && self.critic.psi.all_finite()
    }
}

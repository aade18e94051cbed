use dodt_autodiff::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::behavior::LatentModel;
use super::WorldModelConfig;
use crate::nn::{self, Activation, Linear, Mlp};
use crate::replay::SequenceWindow;
use crate::{Error, Result};

/// Value-level latent state of a single environment.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub deter: Vec<f64>,
    pub stoch: Vec<f64>,
    pub stoch_mean: Vec<f64>,
    pub stoch_std: Vec<f64>,
}

impl LatentState {
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.deter.clone();
        f.extend_from_slice(&self.stoch);
        f
    }
}

/// Batched latent state on a tape: `deter` is `[B, d_h]`, `stoch` `[B, d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub deter: Var,
    pub stoch: Var,
}

/// Diagonal Gaussian on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Dist {
    pub mean: Var,
    pub std: Var,
}

/// Loss terms of one dynamics-learning step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WmLosses {
    /// Observation reconstruction NLL (unit variance, constant dropped).
    pub recon: f64,
    /// Mean KL(posterior ‖ prior) before the free-nats floor.
    pub kl: f64,
    /// Reward NLL (unit variance, constant dropped).
    pub reward: f64,
    /// True when the step was skipped because the loss was not finite.
    pub skipped: bool,
}

/// Representation, transition, observation and reward models.
///
/// `zeta` holds everything except the reward head, which lives in `xi`.
#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldModelConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub zeta: ParamStore,
    pub xi: ParamStore,
    opt_zeta: AdamState,
    opt_xi: AdamState,
    encoder: Mlp,
    img_in: Linear,
    gru: Linear,
    prior: Mlp,
    posterior: Mlp,
    decoder: Mlp,
    reward: Mlp,
    pub skipped_steps: usize,
}

impl WorldModel {
    pub fn new<R: Rng>(
        cfg: WorldModelConfig,
        obs_dim: usize,
        act_dim: usize,
        plain_sgd: bool,
        rng: &mut R,
    ) -> Self {
        let (h, dh, dz) = (cfg.hidden, cfg.deter, cfg.stoch);
        let mut zeta = ParamStore::new();
        let mut xi = ParamStore::new();
        let encoder = Mlp::new(
            &mut zeta,
            "encoder",
            &[obs_dim, h, h],
            Activation::Tanh,
            rng,
        );
        let img_in = Linear::new(&mut zeta, "img_in", dz + act_dim, h, rng);
        let gru = Linear::new(&mut zeta, "gru", h + dh, 3 * dh, rng);
        let prior = Mlp::new(&mut zeta, "prior", &[dh, h, 2 * dz], Activation::Tanh, rng);
        let posterior = Mlp::new(
            &mut zeta,
            "posterior",
            &[dh + h, h, 2 * dz],
            Activation::Tanh,
            rng,
        );
        let decoder = Mlp::new(
            &mut zeta,
            "decoder",
            &[dh + dz, h, h, obs_dim],
            Activation::Tanh,
            rng,
        );
        let reward = Mlp::new(
            &mut xi,
            "reward",
            &[dh + dz, h, h, 1],
            Activation::Tanh,
            rng,
        );
        let adam = AdamConfig {
            plain_sgd,
            ..AdamConfig::with_lr(cfg.lr)
        };
        Self {
            opt_zeta: AdamState::new(adam, &zeta),
            opt_xi: AdamState::new(adam, &xi),
            cfg,
            obs_dim,
            act_dim,
            zeta,
            xi,
            encoder,
            img_in,
            gru,
            prior,
            posterior,
            decoder,
            reward,
            skipped_steps: 0,
        }
    }

    pub fn feature_size(&self) -> usize {
        self.cfg.deter + self.cfg.stoch
    }

    /// Zero state for a batch of `n`.
    pub fn initial(&self, g: &mut Graph, n: usize) -> LatentVars {
        LatentVars {
            deter: g.constant(&Tensor::zeros(&[n, self.cfg.deter])),
            stoch: g.constant(&Tensor::zeros(&[n, self.cfg.stoch])),
        }
    }

    pub fn features(&self, g: &mut Graph, s: LatentVars) -> Result<Var> {
        Ok(g.concat(&[s.deter, s.stoch])?)
    }

    pub fn encode(&self, g: &mut Graph, obs: Var) -> Result<Var> {
        let e = self.encoder.forward(g, &self.zeta, obs)?;
        Ok(g.tanh(e))
    }

    /// Recurrent cell shared by prior and posterior.
    pub fn deter_step(&self, g: &mut Graph, prev: LatentVars, action: Var) -> Result<Var> {
        let dh = self.cfg.deter;
        let x = g.concat(&[prev.stoch, action])?;
        let x = self.img_in.forward(g, &self.zeta, x)?;
        let x = g.tanh(x);
        let xh = g.concat(&[x, prev.deter])?;
        let parts = self.gru.forward(g, &self.zeta, xh)?;
        let reset = g.slice(parts, 0, dh)?;
        let reset = g.sigmoid(reset);
        let cand = g.slice(parts, dh, dh)?;
        let cand = g.mul(reset, cand)?;
        let cand = g.tanh(cand);
        let update = g.slice(parts, 2 * dh, dh)?;
        let update = g.add_scalar(update, -1.0);
        let update = g.sigmoid(update);
        let delta = g.sub(cand, prev.deter)?;
        let delta = g.mul(update, delta)?;
        Ok(g.add(prev.deter, delta)?)
    }

    fn head(&self, g: &mut Graph, net: &Mlp, input: Var) -> Result<Dist> {
        let dz = self.cfg.stoch;
        let out = net.forward(g, &self.zeta, input)?;
        let mean = g.slice(out, 0, dz)?;
        let raw = g.slice(out, dz, dz)?;
        let std = g.softplus(raw);
        let std = g.add_scalar(std, self.cfg.min_std);
        Ok(Dist { mean, std })
    }

    fn sample<R: Rng + ?Sized>(&self, g: &mut Graph, d: Dist, rng: &mut R) -> Result<Var> {
        let shape = g.shape(d.mean).to_vec();
        let n = shape.iter().product();
        let eps = g.constant_from(&shape, nn::standard_normal(rng, n))?;
        let noise = g.mul(d.std, eps)?;
        Ok(g.add(d.mean, noise)?)
    }

    pub fn prior_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        prev: LatentVars,
        action: Var,
        rng: &mut R,
    ) -> Result<(LatentVars, Dist)> {
        let deter = self.deter_step(g, prev, action)?;
        let prior = self.head(g, &self.prior, deter)?;
        let stoch = self.sample(g, prior, rng)?;
        Ok((LatentVars { deter, stoch }, prior))
    }

    /// Posterior update from an already encoded observation.
    pub fn posterior_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        prev: LatentVars,
        action: Var,
        embed: Var,
        rng: &mut R,
    ) -> Result<(LatentVars, Dist, Dist)> {
        let deter = self.deter_step(g, prev, action)?;
        let prior = self.head(g, &self.prior, deter)?;
        let x = g.concat(&[deter, embed])?;
        let post = self.head(g, &self.posterior, x)?;
        let stoch = self.sample(g, post, rng)?;
        Ok((LatentVars { deter, stoch }, prior, post))
    }

    /// Value-level posterior step for acting in a single environment.
    pub fn observe<R: Rng>(
        &self,
        prev: Option<&LatentState>,
        action: &[f64],
        obs: &[f64],
        rng: &mut R,
    ) -> Result<LatentState> {
        if action.iter().chain(obs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("world-model input"));
        }
        let mut g = Graph::new();
        let prev = match prev {
            Some(p) => LatentVars {
                deter: g.constant_from(&[1, self.cfg.deter], p.deter.clone())?,
                stoch: g.constant_from(&[1, self.cfg.stoch], p.stoch.clone())?,
            },
            None => self.initial(&mut g, 1),
        };
        let a = g.constant_from(&[1, self.act_dim], action.to_vec())?;
        let o = g.constant_from(&[1, self.obs_dim], obs.to_vec())?;
        let embed = self.encode(&mut g, o)?;
        let (s, _, post) = self.posterior_step(&mut g, prev, a, embed, rng)?;
        Ok(LatentState {
            deter: g.value(s.deter).to_vec(),
            stoch: g.value(s.stoch).to_vec(),
            stoch_mean: g.value(post.mean).to_vec(),
            stoch_std: g.value(post.std).to_vec(),
        })
    }

    pub fn reward_head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.reward.forward(g, &self.xi, features)
    }

    /// Loss graph for one batch of windows. Returns the total loss, the three
    /// reported terms and the posterior features of every step stacked as
    /// `[B * (L + 1), F]` (batch-major).
    pub fn loss<R: Rng>(
        &self,
        g: &mut Graph,
        batch: &[SequenceWindow],
        rng: &mut R,
    ) -> Result<(Var, Var, Var, Var, Var)> {
        let b = batch.len();
        let len = batch[0].actions.len();
        let steps = len + 1;
        let mut obs = Vec::with_capacity(steps * b * self.obs_dim);
        for t in 0..steps {
            for w in batch {
                obs.extend_from_slice(&w.observations[t]);
            }
        }
        let obs_tm = g.constant_from(&[steps * b, self.obs_dim], obs)?;
        let embed_all = self.encode(g, obs_tm)?;

        let mut state = self.initial(g, b);
        let mut action = g.constant(&Tensor::zeros(&[b, self.act_dim]));
        let mut feats = Vec::with_capacity(steps);
        let mut kls = Vec::with_capacity(steps);
        for t in 0..steps {
            let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
            let embed = g.gather_rows(embed_all, &rows)?;
            let (s, prior, post) = self.posterior_step(g, state, action, embed, rng)?;
            kls.push(nn::gaussian_kl(
                g, post.mean, post.std, prior.mean, prior.std,
            )?);
            feats.push(self.features(g, s)?);
            state = s;
            if t < len {
                let a: Vec<f64> = batch
                    .iter()
                    .flat_map(|w| w.actions[t].iter().copied())
                    .collect();
                action = g.constant_from(&[b, self.act_dim], a)?;
            }
        }
        let f = self.feature_size();
        let stacked = g.concat(&feats)?;
        let stacked = g.reshape(stacked, &[b * steps, f])?;

        let target: Vec<f64> = batch
            .iter()
            .flat_map(|w| w.observations.iter().flatten().copied())
            .collect();
        let target = g.constant_from(&[b * steps, self.obs_dim], target)?;
        let decoded = self.decoder.forward(g, &self.zeta, stacked)?;
        let err = g.sub(decoded, target)?;
        let err = g.square(err);
        let err = g.sum_last(err);
        let recon = g.mean(err);
        let recon = g.scale(recon, 0.5);

        let next = g.concat(&feats[1..])?;
        let next = g.reshape(next, &[b * len, f])?;
        let pred = self.reward_head(g, next)?;
        let rewards: Vec<f64> = batch
            .iter()
            .flat_map(|w| w.rewards.iter().map(|r| r * self.cfg.reward_scale))
            .collect();
        let rewards = g.constant_from(&[b * len, 1], rewards)?;
        let rerr = g.sub(pred, rewards)?;
        let rerr = g.square(rerr);
        let reward = g.mean(rerr);
        let reward = g.scale(reward, 0.5);

        let kl = g.concat(&kls)?;
        let kl = g.mean(kl);
        let kl_floor = g.clamp_min(kl, self.cfg.free_nats);
        let kl_term = g.scale(kl_floor, self.cfg.kl_scale);
        let total = g.add(recon, reward)?;
        let total = g.add(total, kl_term)?;
        Ok((total, recon, kl, reward, stacked))
    }

    /// One optimizer step on ζ and ξ. Returns the loss terms and the detached
    /// posterior features (`[B * (L + 1)]` rows of size `F`).
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[SequenceWindow],
        rng: &mut R,
    ) -> Result<(WmLosses, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty world-model batch".into()));
        }
        let mut g = Graph::new();
        let (total, recon, kl, reward, feats) = self.loss(&mut g, batch, rng)?;
        let mut out = WmLosses {
            recon: g.scalar(recon),
            kl: g.scalar(kl),
            reward: g.scalar(reward),
            skipped: false,
        };
        let features = g.value(feats).to_vec();
        if !g.scalar(total).is_finite() {
            self.skipped_steps += 1;
            out.skipped = true;
            return Ok((out, features));
        }
        let grads = g.backward(total)?;
        let clip = self.cfg.grad_clip;
        let applied = nn::apply_grads(&mut self.zeta, &mut self.opt_zeta, &grads, clip)
            .and_then(|_| nn::apply_grads(&mut self.xi, &mut self.opt_xi, &grads, clip));
        match applied {
            Ok(_) => Ok((out, features)),
            Err(Error::NonFinite(_)) => {
                self.skipped_steps += 1;
                out.skipped = true;
                Ok((out, features))
            }
            Err(e) => Err(e),
        }
    }

    /// Picks up to `n` rows of a stacked feature matrix as imagination starts.
    pub fn pick_starts<R: Rng>(&self, features: &[f64], n: usize, rng: &mut R) -> Tensor {
        let f = self.feature_size();
        let rows = features.len() / f;
        let n = n.min(rows);
        let mut idx = sample_indices(rng, rows, n).into_vec();
        idx.sort_unstable();
        let data = idx
            .iter()
            .flat_map(|&i| features[i * f..(i + 1) * f].iter().copied())
            .collect();
        Tensor::new(vec![n, f], data).unwrap()
    }
}

impl LatentModel for WorldModel {
    fn feature_dim(&self) -> usize {
        self.feature_size()
    }

    fn imagine_step(
        &self,
        g: &mut Graph,
        features: Var,
        action: Var,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Var, Var)> {
        let deter = g.slice(features, 0, self.cfg.deter)?;
        let stoch = g.slice(features, self.cfg.deter, self.cfg.stoch)?;
        let (s, _) = self.prior_step(g, LatentVars { deter, stoch }, action, rng)?;
        let next = self.features(g, s)?;
        let reward = self.reward_head(g, next)?;
        Ok((next, reward))
    }
}

use dodt_autodiff::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use rand::{Rng, RngCore};

use super::BehaviorConfig;
use crate::nn::{self, Activation, Mlp};
use crate::{Error, Result};

/// Transition model usable for imagination. Features are the flat latent
/// representation consumed by the actor and the value model.
pub trait LatentModel {
    fn feature_dim(&self) -> usize;

    /// Advances `[N, F]` features by `[N, A]` actions; returns the next
    /// features and the predicted reward of the transition (`[N, 1]`).
    fn imagine_step(
        &self,
        g: &mut Graph,
        features: Var,
        action: Var,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Var)>;
}

/// State-value estimate on `[N, F]` features, returning `[N, 1]`.
pub trait ValueFn {
    fn value(&self, g: &mut Graph, features: Var) -> Result<Var>;
}

/// Bootstrap target used by the value regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueTarget {
    /// `r_τ + γ v(s_{τ+1})`.
    Td,
    /// `v(s_{τ+1}) + γ r_τ`, the form written in the algorithm listing.
    Alg2,
}

impl ValueTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueTarget::Td => "td",
            ValueTarget::Alg2 => "alg2",
        }
    }
}

/// Per-step weights of the actor objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorWeighting {
    /// `Σ γ^r v(s_r)`.
    Discounted,
    /// `Σ v(s_r)`.
    Uniform,
}

impl ActorWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            ActorWeighting::Discounted => "discounted",
            ActorWeighting::Uniform => "uniform",
        }
    }

    pub fn weight(self, gamma: f64, r: usize) -> f64 {
        match self {
            ActorWeighting::Discounted => gamma.powi(r as i32),
            ActorWeighting::Uniform => 1.0,
        }
    }
}

/// Tanh-squashed diagonal Gaussian action model `q_φ(a | s)`.
#[derive(Clone, Debug)]
pub struct Actor {
    pub phi: ParamStore,
    opt: AdamState,
    net: Mlp,
    act_dim: usize,
    min_std: f64,
    grad_clip: f64,
    pub skipped_steps: usize,
}

impl Actor {
    pub fn new<R: Rng>(
        cfg: &BehaviorConfig,
        feature_dim: usize,
        act_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut phi = ParamStore::new();
        let h = cfg.hidden;
        let net = Mlp::new(
            &mut phi,
            "actor",
            &[feature_dim, h, h, 2 * act_dim],
            Activation::Tanh,
            rng,
        );
        let adam = AdamConfig {
            plain_sgd: cfg.plain_sgd,
            ..AdamConfig::with_lr(cfg.actor_lr)
        };
        Self {
            opt: AdamState::new(adam, &phi),
            phi,
            net,
            act_dim,
            min_std: cfg.actor_min_std,
            grad_clip: cfg.grad_clip,
            skipped_steps: 0,
        }
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Pre-squash mean and standard deviation.
    pub fn dist(&self, g: &mut Graph, features: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(g, &self.phi, features)?;
        let mean = g.slice(out, 0, self.act_dim)?;
        let raw = g.slice(out, self.act_dim, self.act_dim)?;
        let std = g.softplus(raw);
        Ok((mean, g.add_scalar(std, self.min_std)))
    }

    /// Reparameterized sample `tanh(μ + σ ε)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        features: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let (mean, std) = self.dist(g, features)?;
        let shape = g.shape(mean).to_vec();
        let eps = g.constant_from(&shape, nn::standard_normal(rng, shape.iter().product()))?;
        let noise = g.mul(std, eps)?;
        let pre = g.add(mean, noise)?;
        Ok(g.tanh(pre))
    }

    /// Deterministic action `tanh(μ)`.
    pub fn mode(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let (mean, _) = self.dist(g, features)?;
        Ok(g.tanh(mean))
    }

    /// Actor objective `Σ_r w_r · mean_n v(s_r)` on a recorded rollout.
    pub fn objective(
        g: &mut Graph,
        rollout: &GraphRollout,
        gamma: f64,
        weighting: ActorWeighting,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (r, &v) in rollout.values.iter().enumerate() {
            let m = g.mean(v);
            let term = g.scale(m, weighting.weight(gamma, r));
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("rollouts hold at least one value"))
    }

    /// One ascent step on the objective. Only φ is updated; the value model
    /// and the world model are treated as constants. Returns the actor loss
    /// (negated objective). Consumes the tape.
    pub fn update(
        &mut self,
        g: &mut Graph,
        rollout: &GraphRollout,
        gamma: f64,
        weighting: ActorWeighting,
    ) -> Result<f64> {
        let objective = Self::objective(g, rollout, gamma, weighting)?;
        let loss = g.neg(objective);
        let value = g.scalar(loss);
        if !value.is_finite() {
            self.skipped_steps += 1;
            g.clear();
            return Ok(value);
        }
        let grads = g.backward(loss)?;
        match nn::apply_grads(&mut self.phi, &mut self.opt, &grads, self.grad_clip) {
            Ok(_) => Ok(value),
            Err(Error::NonFinite(_)) => {
                self.skipped_steps += 1;
                Ok(value)
            }
            Err(e) => Err(e),
        }
    }
}

/// Value model `v_ψ(s)`.
#[derive(Clone, Debug)]
pub struct Critic {
    pub psi: ParamStore,
    opt: AdamState,
    net: Mlp,
    grad_clip: f64,
    pub skipped_steps: usize,
}

impl Critic {
    pub fn new<R: Rng>(cfg: &BehaviorConfig, feature_dim: usize, rng: &mut R) -> Self {
        let mut psi = ParamStore::new();
        let h = cfg.hidden;
        let net = Mlp::new(
            &mut psi,
            "critic",
            &[feature_dim, h, h, 1],
            Activation::Tanh,
            rng,
        );
        let adam = AdamConfig {
            plain_sgd: cfg.plain_sgd,
            ..AdamConfig::with_lr(cfg.critic_lr)
        };
        Self {
            opt: AdamState::new(adam, &psi),
            psi,
            net,
            grad_clip: cfg.grad_clip,
            skipped_steps: 0,
        }
    }

    /// Values of a value-level feature matrix.
    pub fn values(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(features);
        let v = self.value(&mut g, x)?;
        Ok(g.value(v).to_vec())
    }

    /// Regression target for every imagined transition (`H` rows of `N`).
    pub fn targets(
        &self,
        rollout: &ImaginedRollout,
        gamma: f64,
        form: ValueTarget,
    ) -> Result<Vec<Vec<f64>>> {
        (0..rollout.horizon())
            .map(|r| {
                let next = self.values(&rollout.feature_tensor(r + 1))?;
                Ok(next
                    .iter()
                    .zip(&rollout.rewards[r])
                    .map(|(&v, &rew)| match form {
                        ValueTarget::Td => rew + gamma * v,
                        ValueTarget::Alg2 => v + gamma * rew,
                    })
                    .collect())
            })
            .collect()
    }

    /// `½ Σ_τ (target_τ − v(s_τ))²` averaged over the batch, with the target
    /// held fixed.
    pub fn loss(
        &self,
        g: &mut Graph,
        rollout: &ImaginedRollout,
        targets: &[Vec<f64>],
    ) -> Result<Var> {
        let (h, n, f) = (rollout.horizon(), rollout.batch, rollout.feature_dim);
        let feats: Vec<f64> = rollout.features[..h].iter().flatten().copied().collect();
        let x = g.constant_from(&[h * n, f], feats)?;
        let v = self.value(g, x)?;
        let y = g.constant_from(&[h * n, 1], targets.iter().flatten().copied().collect())?;
        let d = g.sub(y, v)?;
        let d = g.square(d);
        let s = g.sum(d);
        Ok(g.scale(s, 0.5 / n as f64))
    }

    /// One descent step of the value regression. φ is untouched.
    pub fn update(
        &mut self,
        rollout: &ImaginedRollout,
        gamma: f64,
        form: ValueTarget,
    ) -> Result<f64> {
        let targets = self.targets(rollout, gamma, form)?;
        let mut g = Graph::new();
        let loss = self.loss(&mut g, rollout, &targets)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            self.skipped_steps += 1;
            return Ok(value);
        }
        let grads = g.backward(loss)?;
        match nn::apply_grads(&mut self.psi, &mut self.opt, &grads, self.grad_clip) {
            Ok(_) => Ok(value),
            Err(Error::NonFinite(_)) => {
                self.skipped_steps += 1;
                Ok(value)
            }
            Err(e) => Err(e),
        }
    }
}

impl ValueFn for Critic {
    fn value(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.net.forward(g, &self.psi, features)
    }
}

/// Imagined rollout recorded on a tape.
#[derive(Clone, Debug)]
pub struct GraphRollout {
    /// `H + 1` feature batches `[N, F]`.
    pub features: Vec<Var>,
    /// `H` action batches `[N, A]`.
    pub actions: Vec<Var>,
    /// `H` predicted reward batches `[N, 1]`.
    pub rewards: Vec<Var>,
    /// `H + 1` value batches `[N, 1]`.
    pub values: Vec<Var>,
}

impl GraphRollout {
    pub fn detach(&self, g: &Graph) -> ImaginedRollout {
        let shape = g.shape(self.features[0]);
        ImaginedRollout {
            batch: shape[0],
            feature_dim: shape[1],
            features: self.features.iter().map(|&v| g.value(v).to_vec()).collect(),
            actions: self.actions.iter().map(|&v| g.value(v).to_vec()).collect(),
            rewards: self.rewards.iter().map(|&v| g.value(v).to_vec()).collect(),
            values: self.values.iter().map(|&v| g.value(v).to_vec()).collect(),
        }
    }
}

/// Value-level imagined rollout over a batch of `N` starts.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedRollout {
    pub batch: usize,
    pub feature_dim: usize,
    /// `H + 1` entries, each `N * F` values.
    pub features: Vec<Vec<f64>>,
    /// `H` entries, each `N * A` values.
    pub actions: Vec<Vec<f64>>,
    /// `H` entries of `N` rewards.
    pub rewards: Vec<Vec<f64>>,
    /// `H + 1` entries of `N` values.
    pub values: Vec<Vec<f64>>,
}

impl ImaginedRollout {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    pub fn feature_tensor(&self, step: usize) -> Tensor {
        Tensor::new(
            vec![self.batch, self.feature_dim],
            self.features[step].clone(),
        )
        .unwrap()
    }

    /// The actor objective recomputed from stored values.
    pub fn objective(&self, gamma: f64, weighting: ActorWeighting) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(r, v)| weighting.weight(gamma, r) * v.iter().sum::<f64>() / v.len() as f64)
            .sum()
    }
}

/// Rolls `starts` (`[N, F]`) forward `horizon` steps in latent space with
/// actions from the actor. Nothing here touches an environment.
pub fn imagine<R: Rng>(
    g: &mut Graph,
    model: &dyn LatentModel,
    actor: &Actor,
    value: &dyn ValueFn,
    starts: &Tensor,
    horizon: usize,
    rng: &mut R,
) -> Result<GraphRollout> {
    if horizon == 0 {
        return Err(Error::InvalidArgument(
            "imagination horizon must be positive".into(),
        ));
    }
    if starts.shape().len() != 2 || starts.shape()[1] != model.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "imagination starts have shape {:?}, expected [N, {}]",
            starts.shape(),
            model.feature_dim()
        )));
    }
    if !starts.is_finite() {
        return Err(Error::NonFinite("imagination start state"));
    }
    let mut feat = g.constant(starts);
    let mut out = GraphRollout {
        features: vec![feat],
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        values: vec![value.value(g, feat)?],
    };
    for _ in 0..horizon {
        let a = actor.sample(g, feat, rng)?;
        let (next, reward) = model.imagine_step(g, feat, a, rng)?;
        feat = next;
        out.actions.push(a);
        out.rewards.push(reward);
        out.features.push(feat);
        out.values.push(value.value(g, feat)?);
    }
    Ok(out)
}

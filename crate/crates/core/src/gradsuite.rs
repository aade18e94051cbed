//! Finite-difference checks of the composite training losses.
//!
//! Every loss is rebuilt from scratch for each probe with fixed RNG streams,
//! so stochastic layers draw the same noise and the loss is a deterministic
//! function of the parameters being probed.

use dodt_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::env::{Env, Pendulum};
use crate::odt::{OdtConfig, Transformer};
use crate::replay::SequenceDataset;
use crate::tokens::TokenSequence;
use crate::world_model::{
    imagine, Actor, ActorWeighting, BehaviorConfig, Critic, Dreamer, DreamerConfig, ValueTarget,
    WorldModel, WorldModelConfig,
};
use crate::{rng, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeCheck {
    pub name: &'static str,
    /// Largest `|analytic − numeric| / max(1, |analytic|)` seen.
    pub worst: f64,
    /// Tensor holding the worst coordinate.
    pub param: String,
}

/// Central differences against reverse mode for the tensors in the store
/// that `store` picks out of `model`, probing up to `per_tensor`
/// coordinates per tensor.
pub fn check_model<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M, &mut Graph) -> Result<Var>,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<(f64, String)> {
    let mut g = Graph::new();
    let y = loss(model, &mut g)?;
    let grads = g.backward(y)?;
    let n_tensors = store(model).len();
    let analytic: Vec<Vec<f64>> = (0..n_tensors)
        .map(|i| {
            let s = store(model);
            grads
                .param(s.param_ref(i))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; s.get(i).numel()])
        })
        .collect();
    let mut r = rng::stream(seed, &[]);
    let mut worst = (0.0f64, String::new());
    for (i, grad) in analytic.iter().enumerate() {
        let coords: Vec<usize> = if grad.len() <= per_tensor {
            (0..grad.len()).collect()
        } else {
            (0..per_tensor)
                .map(|_| r.gen_range(0..grad.len()))
                .collect()
        };
        for j in coords {
            let orig = store(model).get(i).data()[j];
            let mut at = |v: f64| -> Result<f64> {
                store(model).get_mut(i).data_mut()[j] = v;
                let mut g = Graph::new();
                let y = loss(model, &mut g)?;
                Ok(g.scalar(y))
            };
            let up = at(orig + h)?;
            let down = at(orig - h)?;
            store(model).get_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = (grad[j] - numeric).abs() / grad[j].abs().max(1.0);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e.max(worst.0), store(model).name(i).to_string());
            }
        }
    }
    Ok(worst)
}

fn small_wm() -> WorldModelConfig {
    WorldModelConfig {
        deter: 12,
        stoch: 4,
        hidden: 12,
        seq_len: 6,
        batch: 3,
        // Keep the KL term active so its gradient is probed too.
        free_nats: 0.0,
        ..WorldModelConfig::default()
    }
}

fn small_behavior() -> BehaviorConfig {
    BehaviorConfig {
        hidden: 12,
        horizon: 3,
        imagine_starts: 4,
        ..BehaviorConfig::default()
    }
}

struct DreamerParts {
    wm: WorldModel,
    actor: Actor,
    critic: Critic,
}

/// Runs every composite check with step `h`.
pub fn composite_suite(seed: u64, h: f64, per_tensor: usize) -> Result<Vec<CompositeCheck>> {
    let mut out = Vec::new();
    let mut push = |name, (worst, param)| out.push(CompositeCheck { name, worst, param });

    let cfg = DreamerConfig {
        wm: small_wm(),
        behavior: small_behavior(),
        dataset_capacity: 10,
    };
    let mut d = Dreamer::new(cfg, Pendulum::new().spec().clone(), seed);
    let mut env = Pendulum::new();
    let mut r = rng::stream(seed, &[1]);
    let mut data = SequenceDataset::new(4);
    data.push(d.random_episode(&mut env, seed, &mut r)?);
    let batch = data.sample(3, 6, &mut r)?;

    let wm_loss = |m: &WorldModel, g: &mut Graph| -> Result<Var> {
        let (total, ..) = m.loss(g, &batch, &mut rng::stream(seed, &[2]))?;
        Ok(total)
    };
    push(
        "world_model_loss/representation",
        check_model(&mut d.wm, |m| &mut m.zeta, wm_loss, h, per_tensor, seed)?,
    );
    push(
        "world_model_loss/reward",
        check_model(&mut d.wm, |m| &mut m.xi, wm_loss, h, per_tensor, seed)?,
    );

    let mut parts = DreamerParts {
        wm: d.wm.clone(),
        actor: d.actor.clone(),
        critic: d.critic.clone(),
    };
    let f = parts.wm.feature_size();
    let starts = Tensor::uniform(&[4, f], 1.0, &mut r);
    let actor_obj = |p: &DreamerParts, g: &mut Graph| -> Result<Var> {
        let ro = imagine(
            g,
            &p.wm,
            &p.actor,
            &p.critic,
            &starts,
            3,
            &mut rng::stream(seed, &[3]),
        )?;
        Actor::objective(g, &ro, 0.99, ActorWeighting::Discounted)
    };
    push(
        "actor_objective",
        check_model(
            &mut parts,
            |p| &mut p.actor.phi,
            actor_obj,
            h,
            per_tensor,
            seed,
        )?,
    );

    let mut g = Graph::new();
    let ro = imagine(
        &mut g,
        &parts.wm,
        &parts.actor,
        &parts.critic,
        &starts,
        3,
        &mut rng::stream(seed, &[3]),
    )?;
    let detached = ro.detach(&g);
    let targets = parts.critic.targets(&detached, 0.99, ValueTarget::Td)?;
    let critic_loss = |c: &Critic, g: &mut Graph| c.loss(g, &detached, &targets);
    push(
        "value_loss",
        check_model(
            &mut parts.critic,
            |c| &mut c.psi,
            critic_loss,
            h,
            per_tensor,
            seed,
        )?,
    );

    let ocfg = OdtConfig {
        context_len: 4,
        width: 8,
        layers: 2,
        heads: 2,
        max_timestep: 32,
        rtg_scale: 10.0,
        ..OdtConfig::default()
    };
    let mut odt = Transformer::new(ocfg, 3, 1, &mut r)?;
    let seqs: Vec<TokenSequence> = (0..3)
        .map(|i| {
            let valid = 2 + i;
            let rtg: Vec<f64> = (0..valid).map(|_| r.gen_range(-10.0..10.0)).collect();
            let o: Vec<Vec<f64>> = (0..valid)
                .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let a: Vec<Vec<f64>> = (0..valid).map(|_| vec![r.gen_range(-0.9..0.9)]).collect();
            let ts: Vec<usize> = (i..i + valid).collect();
            TokenSequence::left_padded(4, &rtg, &o, &a, &ts)
        })
        .collect::<Result<_>>()?;
    let nll = |m: &Transformer, g: &mut Graph| Ok(m.loss(g, &seqs)?.1);
    push(
        "odt_nll",
        check_model(&mut odt, |m| &mut m.theta, nll, h, per_tensor, seed)?,
    );
    let total = |m: &Transformer, g: &mut Graph| Ok(m.loss(g, &seqs)?.0);
    push(
        "odt_loss",
        check_model(&mut odt, |m| &mut m.theta, total, h, per_tensor, seed)?,
    );
    Ok(out)
}

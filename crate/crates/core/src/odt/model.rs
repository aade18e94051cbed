use std::f64::consts::{E, PI};

use dodt_autodiff::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::OdtConfig;
use crate::nn::{self, Activation, LayerNorm, Linear, Mlp};
use crate::tokens::TokenSequence;
use crate::{Error, Result};

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Per-position Gaussian action distribution, `[B * K, A]` each.
#[derive(Clone, Copy, Debug)]
pub struct OdtOutput {
    pub mean: Var,
    pub log_std: Var,
}

/// Loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OdtLosses {
    /// Mean action negative log-likelihood over valid positions.
    pub nll: f64,
    /// Mean Gaussian entropy over valid positions.
    pub entropy: f64,
    pub skipped: bool,
}

/// Transformer parameters θ and their optimizer.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: OdtConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub theta: ParamStore,
    opt: AdamState,
    embed_rtg: Linear,
    embed_obs: Linear,
    embed_act: Linear,
    timestep: usize,
    embed_ln: LayerNorm,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    pub skipped_steps: usize,
}

impl Transformer {
    pub fn new<R: Rng>(
        cfg: OdtConfig,
        obs_dim: usize,
        act_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut theta = ParamStore::new();
        let embed_rtg = Linear::new(&mut theta, "embed_rtg", 1, w, rng);
        let embed_obs = Linear::new(&mut theta, "embed_obs", obs_dim, w, rng);
        let embed_act = Linear::new(&mut theta, "embed_act", act_dim, w, rng);
        let timestep = theta.add(
            "embed_timestep",
            Tensor::uniform(&[cfg.max_timestep, w], (3.0 / w as f64).sqrt(), rng),
        );
        let embed_ln = LayerNorm::new(&mut theta, "embed_ln", w);
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut theta, &format!("block{i}.ln1"), w),
                qkv: Linear::new(&mut theta, &format!("block{i}.qkv"), w, 3 * w, rng),
                proj: Linear::new(&mut theta, &format!("block{i}.proj"), w, w, rng),
                ln2: LayerNorm::new(&mut theta, &format!("block{i}.ln2"), w),
                mlp: Mlp::new(
                    &mut theta,
                    &format!("block{i}.mlp"),
                    &[w, cfg.mlp_ratio * w, w],
                    Activation::Relu,
                    rng,
                ),
            })
            .collect();
        let final_ln = LayerNorm::new(&mut theta, "final_ln", w);
        let head = Linear::new(&mut theta, "head", w, 2 * act_dim, rng);
        let adam = AdamConfig {
            plain_sgd: cfg.plain_sgd,
            ..AdamConfig::with_lr(cfg.lr)
        };
        Ok(Self {
            opt: AdamState::new(adam, &theta),
            cfg,
            obs_dim,
            act_dim,
            theta,
            embed_rtg,
            embed_obs,
            embed_act,
            timestep,
            embed_ln,
            blocks,
            final_ln,
            head,
            skipped_steps: 0,
        })
    }

    fn check_batch(&self, batch: &[TokenSequence]) -> Result<usize> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty transformer batch".into()))?;
        let k = first.context_len();
        if k > self.cfg.context_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {k} steps exceeds context length {}",
                self.cfg.context_len
            )));
        }
        for s in batch {
            s.validate()?;
            if s.context_len() != k {
                return Err(Error::InvalidArgument(
                    "sequences in a batch differ in length".into(),
                ));
            }
            if s.observations.iter().any(|o| o.len() != self.obs_dim)
                || s.actions.iter().any(|a| a.len() != self.act_dim)
            {
                return Err(Error::DimMismatch {
                    expected_obs: self.obs_dim,
                    expected_act: self.act_dim,
                    found_obs: s.observations[0].len(),
                    found_act: s.actions[0].len(),
                });
            }
        }
        Ok(k)
    }

    /// Additive attention mask `[B, 3K, 3K]`: query `i` may see key `j` when
    /// `j ≤ i` and `j` is not padding. Padding queries see only themselves.
    fn mask(batch: &[TokenSequence], k: usize) -> Vec<f64> {
        let n = 3 * k;
        let mut m = vec![f64::NEG_INFINITY; batch.len() * n * n];
        for (b, s) in batch.iter().enumerate() {
            let first_valid = 3 * s.pad_len();
            for i in 0..n {
                let row = &mut m[(b * n + i) * n..(b * n + i + 1) * n];
                row[i] = 0.0;
                if i >= first_valid {
                    row[first_valid..=i].fill(0.0);
                }
            }
        }
        m
    }

    /// Action distribution at every position of every sequence. The output
    /// at step `t` depends only on tokens up to and including `s_t`.
    pub fn forward(&self, g: &mut Graph, batch: &[TokenSequence]) -> Result<OdtOutput> {
        let k = self.check_batch(batch)?;
        let (b, w, a) = (batch.len(), self.cfg.width, self.act_dim);
        let rows = b * k;
        let flat =
            |f: &dyn Fn(&TokenSequence) -> Vec<f64>| batch.iter().flat_map(f).collect::<Vec<f64>>();
        let scale = self.cfg.rtg_scale;
        let rtg = g.constant_from(
            &[rows, 1],
            flat(&|s| s.rtg.iter().map(|r| r / scale).collect()),
        )?;
        let obs = g.constant_from(&[rows, self.obs_dim], flat(&|s| s.observations.concat()))?;
        let act = g.constant_from(&[rows, a], flat(&|s| s.actions.concat()))?;
        let t_idx: Vec<usize> = batch
            .iter()
            .flat_map(|s| {
                s.timesteps
                    .iter()
                    .map(|&t| t.min(self.cfg.max_timestep - 1))
            })
            .collect();
        let table = g.param(&self.theta, self.timestep);
        let time = g.gather_rows(table, &t_idx)?;

        let eg = self.embed_rtg.forward(g, &self.theta, rtg)?;
        let eg = g.add(eg, time)?;
        let es = self.embed_obs.forward(g, &self.theta, obs)?;
        let es = g.add(es, time)?;
        let ea = self.embed_act.forward(g, &self.theta, act)?;
        let ea = g.add(ea, time)?;
        let tokens = g.concat(&[eg, es, ea])?;
        let tokens = g.reshape(tokens, &[b, 3 * k, w])?;
        let mut x = self.embed_ln.forward(g, &self.theta, tokens)?;

        let mask = g.constant_from(&[b, 3 * k, 3 * k], Self::mask(batch, k))?;
        let heads = self.cfg.heads;
        let d = w / heads;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, &self.theta, x)?;
            let qkv = blk.qkv.forward(g, &self.theta, h)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = g.slice(qkv, hd * d, d)?;
                let kk = g.slice(qkv, w + hd * d, d)?;
                let v = g.slice(qkv, 2 * w + hd * d, d)?;
                let kt = g.transpose(kk)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, inv_sqrt_d);
                let scores = g.add(scores, mask)?;
                let att = g.softmax(scores);
                outs.push(g.matmul(att, v)?);
            }
            let att = if heads == 1 {
                outs[0]
            } else {
                g.concat(&outs)?
            };
            let att = blk.proj.forward(g, &self.theta, att)?;
            x = g.add(x, att)?;
            let h = blk.ln2.forward(g, &self.theta, x)?;
            let h = blk.mlp.forward(g, &self.theta, h)?;
            x = g.add(x, h)?;
        }
        let x = self.final_ln.forward(g, &self.theta, x)?;
        let x = g.reshape(x, &[rows, 3 * w])?;
        let state_tokens = g.slice(x, w, w)?;
        let out = self.head.forward(g, &self.theta, state_tokens)?;
        let mean = g.slice(out, 0, a)?;
        let mean = g.tanh(mean);
        let raw = g.slice(out, a, a)?;
        let raw = g.tanh(raw);
        let raw = g.add_scalar(raw, 1.0);
        let log_std = g.scale(raw, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
        let log_std = g.add_scalar(log_std, LOG_STD_MIN);
        Ok(OdtOutput { mean, log_std })
    }

    /// Returns `(loss, nll, entropy)` where `loss = nll − entropy_coef ·
    /// entropy`, both averaged over valid positions.
    pub fn loss(&self, g: &mut Graph, batch: &[TokenSequence]) -> Result<(Var, Var, Var)> {
        let out = self.forward(g, batch)?;
        let k = batch[0].context_len();
        let rows = batch.len() * k;
        let target: Vec<f64> = batch.iter().flat_map(|s| s.actions.concat()).collect();
        let target = g.constant_from(&[rows, self.act_dim], target)?;
        let mask: Vec<f64> = batch
            .iter()
            .flat_map(|s| (0..k).map(move |i| if i >= s.pad_len() { 1.0 } else { 0.0 }))
            .collect();
        let valid: f64 = mask.iter().sum();
        let mask = g.constant_from(&[rows], mask)?;

        let inv_std = g.neg(out.log_std);
        let inv_std = g.exp(inv_std);
        let diff = g.sub(target, out.mean)?;
        let z = g.mul(diff, inv_std)?;
        let z2 = g.square(z);
        let z2 = g.scale(z2, 0.5);
        let nll = g.add(z2, out.log_std)?;
        let nll = g.add_scalar(nll, 0.5 * (2.0 * PI).ln());
        let nll = g.sum_last(nll);
        let nll = g.mul(nll, mask)?;
        let nll = g.sum(nll);
        let nll = g.scale(nll, 1.0 / valid);

        let ent = g.add_scalar(out.log_std, 0.5 * (2.0 * PI * E).ln());
        let ent = g.sum_last(ent);
        let ent = g.mul(ent, mask)?;
        let ent = g.sum(ent);
        let ent = g.scale(ent, 1.0 / valid);

        let bonus = g.scale(ent, -self.cfg.entropy_coef);
        let loss = g.add(nll, bonus)?;
        Ok((loss, nll, ent))
    }

    /// One optimizer step on θ.
    pub fn train_step(&mut self, batch: &[TokenSequence]) -> Result<OdtLosses> {
        let mut g = Graph::new();
        let (loss, nll, ent) = self.loss(&mut g, batch)?;
        let mut out = OdtLosses {
            nll: g.scalar(nll),
            entropy: g.scalar(ent),
            skipped: false,
        };
        if !g.scalar(loss).is_finite() {
            self.skipped_steps += 1;
            out.skipped = true;
            return Ok(out);
        }
        let grads = g.backward(loss)?;
        match nn::apply_grads(&mut self.theta, &mut self.opt, &grads, self.cfg.grad_clip) {
            Ok(_) => Ok(out),
            Err(Error::NonFinite(_)) => {
                self.skipped_steps += 1;
                out.skipped = true;
                Ok(out)
            }
            Err(e) => Err(e),
        }
    }

    /// Mean and log-std of the action at the last position of `seq`.
    pub fn predict(&self, seq: &TokenSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, std::slice::from_ref(seq))?;
        let a = self.act_dim;
        let last = seq.context_len() - 1;
        let mean = g.value(out.mean)[last * a..(last + 1) * a].to_vec();
        let log_std = g.value(out.log_std)[last * a..(last + 1) * a].to_vec();
        Ok((mean, log_std))
    }
}

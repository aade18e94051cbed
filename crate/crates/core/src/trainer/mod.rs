//! The alternating round loop.
//!
//! Each round runs, in order:
//! 1. Dreamer takes `T` environment steps (its current episode carries over
//!    between rounds) and performs `C` dynamics + behavior updates;
//! 2. Dreamer episodes that finished this round go into the ODT buffer
//!    (tagged `dreamer`);
//! 3. ODT plays one exploration episode conditioned on `t_online` and
//!    inserts it;
//! 4. ODT fine-tunes for `I` iterations on windows sampled from the buffer;
//! 5. evaluation and metric logging.
//!
//! `odt` mode skips 1 and 2 and evicts the oldest trajectory; `dreamer`
//! mode skips 3 and 4 and evaluates Dreamer's own policy.

mod experiment;
mod metrics;

pub use experiment::{run_experiment, run_seed, ExperimentResult};
pub use metrics::{
    median, parse_metrics, read_metrics, render_metrics, steps_to_reach, summarize_seeds,
    MetricsTable, METRICS_HEADER,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::{Env, EnvSpec};
use crate::odt::{evaluate, rollout_online, Transformer};
use crate::replay::{self, EvictionPolicy, Source, Trajectory, TrajectoryBuffer};
use crate::rng::{self, Rng};
use crate::world_model::{ActMode, Dreamer};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Odt,
    Dreamer,
    Dodt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferPolicy {
    RealEnvTrajectories,
    None,
}

/// Buffer eviction as configured; `Auto` picks per algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvictionMode {
    Auto,
    Oldest,
    LowestReward,
}

macro_rules! named_enum {
    ($t:ident, $what:literal, $($v:ident => $s:literal),*) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $($t::$v => $s),* }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($t::$v),)*
                    other => Err(Error::InvalidArgument(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

named_enum!(Algo, "algorithm", Odt => "odt", Dreamer => "dreamer", Dodt => "dodt");
named_enum!(TransferPolicy, "transfer policy", RealEnvTrajectories => "real_env_trajectories", None => "none");
named_enum!(EvictionMode, "eviction mode", Auto => "auto", Oldest => "oldest", LowestReward => "lowest_reward");

impl EvictionMode {
    pub fn resolve(self, algo: Algo) -> EvictionPolicy {
        match (self, algo) {
            (EvictionMode::Oldest, _) | (EvictionMode::Auto, Algo::Odt) => EvictionPolicy::Oldest,
            _ => EvictionPolicy::LowestReward,
        }
    }
}

/// Loss terms averaged over the round's updates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundLosses {
    pub wm_recon: Option<f64>,
    pub wm_kl: Option<f64>,
    pub wm_reward: Option<f64>,
    pub actor_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub odt_nll: Option<f64>,
    pub odt_entropy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub env_steps_total: usize,
    /// Mean return of the Dreamer episodes that finished this round.
    pub dreamer_return: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    pub benefited_count: Option<usize>,
    pub losses: RoundLosses,
    pub wall_clock_s: Option<f64>,
    /// Environment steps taken by each phase this round.
    pub dreamer_steps: usize,
    pub odt_steps: usize,
}

impl RoundReport {
    /// Values in [`METRICS_HEADER`] order.
    pub fn metrics_row(&self) -> [Option<f64>; 14] {
        let l = &self.losses;
        [
            Some(self.round as f64),
            Some(self.env_steps_total as f64),
            self.dreamer_return,
            self.eval_mean,
            self.eval_std,
            self.benefited_count.map(|c| c as f64),
            l.wm_recon,
            l.wm_kl,
            l.wm_reward,
            l.actor_loss,
            l.value_loss,
            l.odt_nll,
            l.odt_entropy,
            self.wall_clock_s,
        ]
    }
}

/// Counters backing the ownership audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    /// Environment steps observed while Dreamer trained in imagination.
    pub imagination_env_steps: u64,
    /// Buffer reads during Dreamer phases.
    pub dreamer_buffer_reads: u64,
    /// Dataset writes during ODT phases.
    pub odt_dataset_writes: u64,
}

/// Dreamer-sourced buffer entries whose id appears in `sampled`.
pub fn count_benefited(buffer: &TrajectoryBuffer, sampled: &BTreeSet<u64>) -> usize {
    buffer
        .entries()
        .iter()
        .filter(|t| t.source == Source::Dreamer && sampled.contains(&t.created_at))
        .count()
}

struct OpenEpisode {
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    random: bool,
}

/// All learners and buffers of one seed.
pub struct Trainer {
    cfg: RunConfig,
    algo: Algo,
    seed: u64,
    spec: EnvSpec,
    dreamer_env: Box<dyn Env>,
    odt_env: Box<dyn Env>,
    eval_env: Box<dyn Env>,
    pub dreamer: Option<Dreamer>,
    pub odt: Option<Transformer>,
    pub buffer: TrajectoryBuffer,
    open: Option<OpenEpisode>,
    dreamer_episodes: u64,
    round: usize,
    env_steps: usize,
    last_eval: Option<usize>,
    dreamer_rng: Rng,
    odt_rng: Rng,
    sample_rng: Rng,
    audit: Audit,
    started: Instant,
}

const DREAMER: u64 = 0xd4ea;
const ODT: u64 = 0x0d7;
const SAMPLE: u64 = 0x5a3e;
const EVAL: u64 = 0xe7a1;

impl Trainer {
    pub fn new(cfg: &RunConfig, algo: Algo, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.run.env;
        let spec = env.make().spec().clone();
        let dreamer = (algo != Algo::Odt).then(|| {
            Dreamer::new(
                cfg.dreamer_config(),
                spec.clone(),
                rng::derive(seed, &[DREAMER, 0]),
            )
        });
        let odt = if algo == Algo::Dreamer {
            None
        } else {
            let mut r = rng::stream(seed, &[ODT, 0]);
            Some(Transformer::new(
                cfg.odt.clone(),
                spec.obs_dim,
                spec.act_dim,
                &mut r,
            )?)
        };
        let mut buffer =
            TrajectoryBuffer::new(cfg.dodt.buffer_capacity, cfg.dodt.eviction.resolve(algo));
        if let Some(path) = &cfg.run.offline_path {
            let (obs, act, trajs) = replay::file::load(path)?;
            if (obs, act) != (spec.obs_dim, spec.act_dim) {
                return Err(Error::DimMismatch {
                    expected_obs: spec.obs_dim,
                    expected_act: spec.act_dim,
                    found_obs: obs,
                    found_act: act,
                }
                .in_file(path));
            }
            let n = match cfg.run.offline_top_n {
                0 => cfg.dodt.buffer_capacity,
                n => n,
            };
            buffer.seed_from_offline(&trajs, n)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            algo,
            seed,
            spec,
            dreamer_env: env.make(),
            odt_env: env.make(),
            eval_env: env.make(),
            dreamer,
            odt,
            buffer,
            open: None,
            dreamer_episodes: 0,
            round: 0,
            env_steps: 0,
            last_eval: None,
            dreamer_rng: rng::stream(seed, &[DREAMER, 1]),
            odt_rng: rng::stream(seed, &[ODT, 1]),
            sample_rng: rng::stream(seed, &[SAMPLE]),
            audit: Audit::default(),
            started: Instant::now(),
        })
    }

    pub fn algo(&self) -> Algo {
        self.algo
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn audit(&self) -> Audit {
        self.audit
    }

    /// True once `R` rounds ran or the step budget is spent.
    pub fn finished(&self) -> bool {
        let budget = self.cfg.run.env_step_budget;
        self.round >= self.cfg.run.rounds || (budget > 0 && self.env_steps >= budget)
    }

    /// Step counters of the Dreamer and ODT interaction environments.
    pub fn interaction_counts(&self) -> (u64, u64) {
        (
            self.dreamer_env.counters().steps,
            self.odt_env.counters().steps,
        )
    }

    fn training_env_steps(&self) -> u64 {
        self.dreamer_env.counters().steps
            + self.odt_env.counters().steps
            + self.eval_env.counters().steps
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        self.round += 1;
        let round = self.round;
        let wrap = |phase: &'static str| {
            move |e: Error| Error::Round {
                round,
                phase,
                source: Box::new(e),
            }
        };
        let mut report = RoundReport {
            round,
            ..RoundReport::default()
        };
        if self.dreamer.is_some() && self.cfg.dodt.dreamer_interaction {
            let finished = self.dreamer_phase(&mut report).map_err(wrap("dreamer"))?;
            if self.algo == Algo::Dodt
                && self.cfg.dodt.transfer_policy == TransferPolicy::RealEnvTrajectories
            {
                for t in finished {
                    self.buffer.insert(t);
                }
            }
        }
        if self.odt.is_some() {
            self.odt_phase(&mut report).map_err(wrap("odt"))?;
        }
        self.env_steps += report.dreamer_steps + report.odt_steps;
        report.env_steps_total = self.env_steps;
        let due = match (self.cfg.run.eval_interval, self.last_eval) {
            (0, _) | (_, None) => true,
            (k, Some(last)) => self.env_steps - last >= k,
        };
        if due || self.finished() {
            self.evaluate_round(&mut report)
                .map_err(wrap("evaluation"))?;
            self.last_eval = Some(self.env_steps);
        }
        if self.audit.dreamer_buffer_reads != 0 {
            return Err(Error::Audit(
                "Dreamer phase read the trajectory buffer".into(),
            ));
        }
        if self.audit.odt_dataset_writes != 0 {
            return Err(Error::Audit("ODT phase wrote the sequence dataset".into()));
        }
        if self.audit.imagination_env_steps != 0 {
            return Err(Error::Audit("imagination stepped an environment".into()));
        }
        if self.cfg.run.record_wall_clock {
            report.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
        }
        Ok(report)
    }

    /// Steps Dreamer's episode `T` times; returns the episodes that ended.
    fn dreamer_phase(&mut self, report: &mut RoundReport) -> Result<Vec<Trajectory>> {
        let reads = self.buffer.reads();
        let d = self
            .dreamer
            .as_mut()
            .expect("dreamer phase without dreamer");
        let sched = &self.cfg.dreamer;
        let mut finished = Vec::new();
        for _ in 0..sched.env_steps {
            let ep = match &mut self.open {
                Some(ep) => ep,
                None => {
                    let seed = rng::derive(self.seed, &[DREAMER, 2, self.dreamer_episodes]);
                    let obs = self.dreamer_env.reset(seed);
                    d.reset_state();
                    self.open.insert(OpenEpisode {
                        observations: vec![obs],
                        actions: Vec::new(),
                        rewards: Vec::new(),
                        random: d.dataset.len() < sched.seed_episodes,
                    })
                }
            };
            let obs = ep.observations.last().unwrap();
            let action = if ep.random {
                use rand::Rng as _;
                (0..self.spec.act_dim)
                    .map(|_| self.dreamer_rng.gen_range(-1.0..=1.0))
                    .collect()
            } else {
                d.act(obs, ActMode::Explore, &mut self.dreamer_rng)?
            };
            let step = self
                .dreamer_env
                .step(&self.spec.denormalize_action(&action))?;
            report.dreamer_steps += 1;
            ep.actions.push(action);
            ep.rewards.push(step.reward);
            ep.observations.push(step.observation.clone());
            if step.done() {
                let ep = self.open.take().unwrap();
                let traj =
                    Trajectory::new(ep.observations, ep.actions, ep.rewards, Source::Dreamer)?;
                self.dreamer_episodes += 1;
                d.dataset.push(traj.clone());
                finished.push(traj);
            }
        }
        if !finished.is_empty() {
            let n = finished.len() as f64;
            report.dreamer_return =
                Some(finished.iter().map(Trajectory::total_return).sum::<f64>() / n);
        }
        let ready = d.dataset.len() >= sched.seed_episodes
            && d.dataset
                .episodes()
                .any(|e| e.len() >= self.cfg.world_model.seq_len);
        if ready && sched.train_steps > 0 {
            let before = self.training_env_steps();
            let d = self.dreamer.as_mut().unwrap();
            let stats = d.train(sched.train_steps, &mut self.dreamer_rng)?;
            self.audit.imagination_env_steps += self.training_env_steps() - before;
            let l = &mut report.losses;
            l.wm_recon = Some(stats.recon);
            l.wm_kl = Some(stats.kl);
            l.wm_reward = Some(stats.reward);
            l.actor_loss = Some(stats.actor_loss);
            l.value_loss = Some(stats.value_loss);
        }
        self.audit.dreamer_buffer_reads += self.buffer.reads() - reads;
        Ok(finished)
    }

    fn odt_phase(&mut self, report: &mut RoundReport) -> Result<()> {
        let writes = self.dreamer.as_ref().map(|d| d.dataset.writes());
        let model = self.odt.as_mut().expect("odt phase without odt");
        let seed = rng::derive(self.seed, &[ODT, 2, self.round as u64]);
        let t_online = model.cfg.t_online;
        let rollout = rollout_online(
            self.odt_env.as_mut(),
            model,
            t_online,
            ActMode::Explore,
            seed,
            &mut self.odt_rng,
        )?;
        report.odt_steps = rollout.trajectory.len();
        self.buffer.insert(rollout.trajectory);

        let cfg = &model.cfg;
        let (iters, batch, k, gamma) = (cfg.iterations, cfg.batch, cfg.context_len, cfg.rtg_gamma);
        let mut sampled = BTreeSet::new();
        let (mut nll, mut ent) = (0.0, 0.0);
        for _ in 0..iters {
            let windows = self
                .buffer
                .sample_windows(batch, k, gamma, &mut self.sample_rng)?;
            sampled.extend(windows.iter().map(|w| w.trajectory_id));
            let seqs: Vec<_> = windows.into_iter().map(|w| w.seq).collect();
            let losses = model.train_step(&seqs)?;
            nll += losses.nll;
            ent += losses.entropy;
        }
        if iters > 0 {
            report.losses.odt_nll = Some(nll / iters as f64);
            report.losses.odt_entropy = Some(ent / iters as f64);
        }
        report.benefited_count = Some(count_benefited(&self.buffer, &sampled));
        if let (Some(before), Some(d)) = (writes, &self.dreamer) {
            self.audit.odt_dataset_writes += d.dataset.writes() - before;
        }
        Ok(())
    }

    fn evaluate_round(&mut self, report: &mut RoundReport) -> Result<()> {
        let seed = rng::derive(self.seed, &[EVAL, self.round as u64]);
        let episodes = self.cfg.run.eval_episodes;
        let result = match (&self.odt, &mut self.dreamer) {
            (Some(m), _) => evaluate(self.eval_env.as_mut(), m, m.cfg.eval_rtg, episodes, seed)?,
            (None, Some(d)) => d.evaluate(self.eval_env.as_mut(), episodes, seed)?,
            (None, None) => return Ok(()),
        };
        report.eval_mean = Some(result.mean);
        report.eval_std = Some(result.std);
        Ok(())
    }

    /// Checkpoints of every learner this trainer owns.
    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("env".to_string(), self.cfg.run.env.to_string());
        meta.insert("obs_dim".to_string(), self.spec.obs_dim.to_string());
        meta.insert("act_dim".to_string(), self.spec.act_dim.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("round".to_string(), self.round.to_string());
        let mut out = Vec::new();
        if let Some(m) = &self.odt {
            out.push(odt_checkpoint(m, meta.clone()));
        }
        if let Some(d) = &self.dreamer {
            let w = &self.cfg.world_model;
            let mut wm_meta = meta.clone();
            for (k, v) in [("deter", w.deter), ("stoch", w.stoch), ("hidden", w.hidden)] {
                wm_meta.insert(k.to_string(), v.to_string());
            }
            let mut c = Checkpoint::new("world_model", wm_meta);
            c.add_store("zeta/", &d.wm.zeta);
            c.add_store("xi/", &d.wm.xi);
            out.push(c);
            let mut c = Checkpoint::new("actor", meta.clone());
            c.add_store("", &d.actor.phi);
            out.push(c);
            let mut c = Checkpoint::new("critic", meta.clone());
            c.add_store("", &d.critic.psi);
            out.push(c);
        }
        out
    }
}

/// ODT checkpoint with enough metadata to rebuild the architecture.
pub fn odt_checkpoint(
    model: &Transformer,
    mut meta: std::collections::BTreeMap<String, String>,
) -> Checkpoint {
    let c = &model.cfg;
    for (k, v) in [
        ("context_len", c.context_len.to_string()),
        ("width", c.width.to_string()),
        ("layers", c.layers.to_string()),
        ("heads", c.heads.to_string()),
        ("mlp_ratio", c.mlp_ratio.to_string()),
        ("max_timestep", c.max_timestep.to_string()),
        ("rtg_scale", c.rtg_scale.to_string()),
        ("obs_dim", model.obs_dim.to_string()),
        ("act_dim", model.act_dim.to_string()),
    ] {
        meta.insert(k.to_string(), v);
    }
    let mut ck = Checkpoint::new("odt", meta);
    ck.add_store("", &model.theta);
    ck
}

/// Rebuilds an ODT from its checkpoint.
pub fn odt_from_checkpoint(ck: &Checkpoint) -> Result<Transformer> {
    let cfg = crate::odt::OdtConfig {
        context_len: ck.meta_value("context_len")?,
        width: ck.meta_value("width")?,
        layers: ck.meta_value("layers")?,
        heads: ck.meta_value("heads")?,
        mlp_ratio: ck.meta_value("mlp_ratio")?,
        max_timestep: ck.meta_value("max_timestep")?,
        rtg_scale: ck.meta_value("rtg_scale")?,
        ..Default::default()
    };
    let (obs, act) = (ck.meta_value("obs_dim")?, ck.meta_value("act_dim")?);
    let mut r = rng::stream(0, &[]);
    let mut m = Transformer::new(cfg, obs, act, &mut r)?;
    ck.restore_store("", &mut m.theta)?;
    Ok(m)
}

//! Run configuration files.
//!
//! INI-style text: `[section]` headers, `key = value` lines, and full-line
//! comments starting with `#` or `;`. Every key has a default, so an empty
//! file is a valid configuration. Unknown sections or keys are errors.
//!
//! ```text
//! [run]
//! env = pendulum
//! seeds = 0, 1, 2
//! rounds = 50
//!
//! [odt]
//! context_len = 10
//! ```
//!
//! [`RunConfig::render`] writes every key with its resolved value; parsing
//! that output reproduces the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::env::EnvName;
use crate::odt::OdtConfig;
use crate::trainer::{EvictionMode, TransferPolicy};
use crate::world_model::{
    ActorWeighting, BehaviorConfig, DreamerConfig, ValueTarget, WorldModelConfig,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub env: EnvName,
    pub seeds: Vec<u64>,
    /// Rounds `R` per seed.
    pub rounds: usize,
    /// Stop once this many training environment steps were taken (0: no limit).
    pub env_step_budget: usize,
    pub eval_episodes: usize,
    /// Evaluate once at least this many environment steps passed since the
    /// previous evaluation (0: every round). The final round always evaluates.
    pub eval_interval: usize,
    pub out_dir: PathBuf,
    /// Trajectory file used to seed the ODT buffer.
    pub offline_path: Option<PathBuf>,
    /// Best offline trajectories kept when seeding (0: buffer capacity).
    pub offline_top_n: usize,
    /// Fill the `wall_clock_s` metrics column. Off by default because it
    /// makes metrics files differ between identical runs.
    pub record_wall_clock: bool,
    /// Replace Adam with plain SGD in every learner.
    pub plain_sgd: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            env: EnvName::Pendulum,
            seeds: vec![0],
            rounds: 1,
            env_step_budget: 0,
            eval_episodes: 2,
            eval_interval: 0,
            out_dir: PathBuf::from("runs"),
            offline_path: None,
            offline_top_n: 0,
            record_wall_clock: false,
            plain_sgd: false,
        }
    }
}

/// Dreamer interaction schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DreamerSchedule {
    /// Environment steps collected per round `T`.
    pub env_steps: usize,
    /// Dynamics + behavior updates per round `C`.
    pub train_steps: usize,
    /// Episodes collected with uniform random actions before the policy acts `S`.
    pub seed_episodes: usize,
    /// Episodes kept in the sequence dataset `D`.
    pub dataset_capacity: usize,
}

impl Default for DreamerSchedule {
    fn default() -> Self {
        Self {
            env_steps: 200,
            train_steps: 10,
            seed_episodes: 1,
            dataset_capacity: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DodtSettings {
    /// Capacity `N` of the ODT trajectory buffer.
    pub buffer_capacity: usize,
    pub eviction: EvictionMode,
    pub transfer_policy: TransferPolicy,
    /// When false the Dreamer phase takes no environment steps (and so never
    /// trains). Used for isolation checks.
    pub dreamer_interaction: bool,
}

impl Default for DodtSettings {
    fn default() -> Self {
        Self {
            buffer_capacity: 1000,
            eviction: EvictionMode::Auto,
            transfer_policy: TransferPolicy::RealEnvTrajectories,
            dreamer_interaction: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub run: RunSettings,
    pub world_model: WorldModelConfig,
    pub behavior: BehaviorConfig,
    pub dreamer: DreamerSchedule,
    pub odt: OdtConfig,
    pub dodt: DodtSettings,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render_value(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, found `{s}`", stringify!($t)))
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
via_fromstr!(usize, u64, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("expected a finite number, found `{s}`")),
        }
    }
    fn render_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<u64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| u64::parse_value(p.trim())).collect()
    }
    fn render_value(&self) -> String {
        let parts: Vec<String> = self.iter().map(u64::to_string).collect();
        parts.join(", ")
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("expected a path".into());
        }
        Ok(PathBuf::from(s))
    }
    fn render_value(&self) -> String {
        self.display().to_string()
    }
}

/// Empty means unset.
impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render_value(&self) -> String {
        self.as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    }
}

macro_rules! via_as_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e: Error| e.to_string())
            }
            fn render_value(&self) -> String {
                self.as_str().to_string()
            }
        }
    )*};
}
via_as_str!(
    EnvName,
    EvictionMode,
    TransferPolicy,
    ValueTarget,
    ActorWeighting
);

macro_rules! config_fields {
    ($($section:literal . $key:literal => $($field:ident).+ : $t:ty;)*) => {
        fn set_field(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
            match (section, key) {
                $(($section, $key) => Some(<$t as ConfigValue>::parse_value(value).map(|v| cfg.$($field).+ = v)),)*
                _ => None,
            }
        }

        fn is_section(name: &str) -> bool {
            [$($section),*].contains(&name)
        }

        fn field_values(cfg: &RunConfig) -> Vec<(&'static str, &'static str, String)> {
            vec![$(($section, $key, <$t as ConfigValue>::render_value(&cfg.$($field).+))),*]
        }
    };
}

config_fields! {
    "run"."env" => run.env: EnvName;
    "run"."seeds" => run.seeds: Vec<u64>;
    "run"."rounds" => run.rounds: usize;
    "run"."env_step_budget" => run.env_step_budget: usize;
    "run"."eval_episodes" => run.eval_episodes: usize;
    "run"."eval_interval" => run.eval_interval: usize;
    "run"."out_dir" => run.out_dir: PathBuf;
    "run"."offline_path" => run.offline_path: Option<PathBuf>;
    "run"."offline_top_n" => run.offline_top_n: usize;
    "run"."record_wall_clock" => run.record_wall_clock: bool;
    "run"."plain_sgd" => run.plain_sgd: bool;
    "world_model"."deter" => world_model.deter: usize;
    "world_model"."stoch" => world_model.stoch: usize;
    "world_model"."hidden" => world_model.hidden: usize;
    "world_model"."seq_len" => world_model.seq_len: usize;
    "world_model"."batch" => world_model.batch: usize;
    "world_model"."lr" => world_model.lr: f64;
    "world_model"."free_nats" => world_model.free_nats: f64;
    "world_model"."kl_scale" => world_model.kl_scale: f64;
    "world_model"."min_std" => world_model.min_std: f64;
    "world_model"."grad_clip" => world_model.grad_clip: f64;
    "world_model"."reward_scale" => world_model.reward_scale: f64;
    "behavior"."horizon" => behavior.horizon: usize;
    "behavior"."gamma" => behavior.gamma: f64;
    "behavior"."hidden" => behavior.hidden: usize;
    "behavior"."actor_lr" => behavior.actor_lr: f64;
    "behavior"."critic_lr" => behavior.critic_lr: f64;
    "behavior"."actor_min_std" => behavior.actor_min_std: f64;
    "behavior"."explore_noise" => behavior.explore_noise: f64;
    "behavior"."imagine_starts" => behavior.imagine_starts: usize;
    "behavior"."value_target" => behavior.value_target: ValueTarget;
    "behavior"."actor_weighting" => behavior.actor_weighting: ActorWeighting;
    "behavior"."grad_clip" => behavior.grad_clip: f64;
    "dreamer"."env_steps" => dreamer.env_steps: usize;
    "dreamer"."train_steps" => dreamer.train_steps: usize;
    "dreamer"."seed_episodes" => dreamer.seed_episodes: usize;
    "dreamer"."dataset_capacity" => dreamer.dataset_capacity: usize;
    "odt"."context_len" => odt.context_len: usize;
    "odt"."width" => odt.width: usize;
    "odt"."layers" => odt.layers: usize;
    "odt"."heads" => odt.heads: usize;
    "odt"."mlp_ratio" => odt.mlp_ratio: usize;
    "odt"."max_timestep" => odt.max_timestep: usize;
    "odt"."rtg_scale" => odt.rtg_scale: f64;
    "odt"."t_online" => odt.t_online: f64;
    "odt"."eval_rtg" => odt.eval_rtg: f64;
    "odt"."iterations" => odt.iterations: usize;
    "odt"."batch" => odt.batch: usize;
    "odt"."entropy_coef" => odt.entropy_coef: f64;
    "odt"."lr" => odt.lr: f64;
    "odt"."grad_clip" => odt.grad_clip: f64;
    "odt"."rtg_gamma" => odt.rtg_gamma: f64;
    "dodt"."buffer_capacity" => dodt.buffer_capacity: usize;
    "dodt"."eviction" => dodt.eviction: EvictionMode;
    "dodt"."transfer_policy" => dodt.transfer_policy: TransferPolicy;
    "dodt"."dreamer_interaction" => dodt.dreamer_interaction: bool;
}

impl RunConfig {
    /// Parses a configuration; errors carry the offending line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(n, "unterminated section header"))?
                    .trim();
                if !is_section(name) {
                    return Err(Error::parse(n, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(n, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::parse(n, format!("key `{key}` outside any section")))?;
            match set_field(&mut cfg, sec, key, value) {
                None => return Err(Error::parse(n, format!("unknown key `{key}` in [{sec}]"))),
                Some(Err(msg)) => return Err(Error::parse(n, format!("{sec}.{key}: {msg}"))),
                Some(Ok(())) => {}
            }
            if !seen.insert((sec.to_string(), key.to_string())) {
                return Err(Error::parse(n, format!("duplicate key `{key}` in [{sec}]")));
            }
        }
        cfg.behavior.plain_sgd = cfg.run.plain_sgd;
        cfg.odt.plain_sgd = cfg.run.plain_sgd;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    /// Every key with its resolved value, grouped by section.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in field_values(self) {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{section}]").unwrap();
                current = section;
            }
            if value.is_empty() {
                writeln!(out, "{key} =").unwrap();
            } else {
                writeln!(out, "{key} = {value}").unwrap();
            }
        }
        out
    }

    pub fn dreamer_config(&self) -> DreamerConfig {
        DreamerConfig {
            wm: self.world_model.clone(),
            behavior: self.behavior.clone(),
            dataset_capacity: self.dreamer.dataset_capacity,
        }
    }

    /// Cross-field checks; errors name the field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        let positive = [
            ("run.rounds", self.run.rounds),
            ("run.eval_episodes", self.run.eval_episodes),
            ("world_model.deter", self.world_model.deter),
            ("world_model.stoch", self.world_model.stoch),
            ("world_model.hidden", self.world_model.hidden),
            ("world_model.seq_len", self.world_model.seq_len),
            ("world_model.batch", self.world_model.batch),
            ("behavior.horizon", self.behavior.horizon),
            ("behavior.hidden", self.behavior.hidden),
            ("behavior.imagine_starts", self.behavior.imagine_starts),
            ("dreamer.dataset_capacity", self.dreamer.dataset_capacity),
            ("dodt.buffer_capacity", self.dodt.buffer_capacity),
        ];
        for (field, v) in positive {
            if v == 0 {
                return fail(field, "must be at least 1");
            }
        }
        if self.run.seeds.is_empty() {
            return fail("run.seeds", "needs at least one seed");
        }
        if !(self.behavior.gamma > 0.0 && self.behavior.gamma < 1.0) {
            return fail("behavior.gamma", "must lie in (0, 1)");
        }
        let non_negative = [
            ("world_model.lr", self.world_model.lr),
            ("world_model.free_nats", self.world_model.free_nats),
            ("world_model.kl_scale", self.world_model.kl_scale),
            ("world_model.grad_clip", self.world_model.grad_clip),
            ("behavior.actor_lr", self.behavior.actor_lr),
            ("behavior.critic_lr", self.behavior.critic_lr),
            ("behavior.explore_noise", self.behavior.explore_noise),
            ("behavior.grad_clip", self.behavior.grad_clip),
            ("odt.lr", self.odt.lr),
            ("odt.grad_clip", self.odt.grad_clip),
        ];
        for (field, v) in non_negative {
            if v < 0.0 {
                return fail(field, "must be non-negative");
            }
        }
        if self.world_model.min_std <= 0.0 {
            return fail("world_model.min_std", "must be positive");
        }
        if self.behavior.actor_min_std <= 0.0 {
            return fail("behavior.actor_min_std", "must be positive");
        }
        self.odt
            .validate()
            .map_err(|e| Error::InvalidArgument(format!("odt: {e}")))
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

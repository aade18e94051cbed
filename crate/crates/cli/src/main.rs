use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dodt_autodiff::{gradcheck, OpKind};
use dodt_core::checkpoint::Checkpoint;
use dodt_core::config::RunConfig;
use dodt_core::env::EnvName;
use dodt_core::odt::evaluate;
use dodt_core::trainer::{odt_from_checkpoint, read_metrics, run_experiment, Algo};
use dodt_core::{gradsuite, plot, replay, Error};

#[derive(Parser)]
#[command(
    name = "dodt",
    version,
    about = "Dreamer + online decision transformer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "dodt")]
        algo: Algo,
        /// Run only this seed (the DODT_SEED environment variable wins over it).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an ODT checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: EnvName,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, allow_hyphen_values = true)]
        rtg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the evaluation episodes to this trajectory file.
        #[arg(long)]
        dump_episodes: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and of the composite losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Render metrics files as an SVG figure.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            algo,
            seed,
            out,
        } => train(&config, algo, seed, out),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            rtg,
            seed,
            dump_episodes,
        } => eval(
            &checkpoint,
            env,
            episodes,
            rtg,
            seed,
            dump_episodes.as_deref(),
        ),
        Command::Gradcheck { seed, inject_fault } => gradcheck_cmd(seed, inject_fault.as_deref()),
        Command::Plot { metrics, out } => plot_cmd(&metrics, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn train(config: &Path, algo: Algo, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(config)?;
    let env_seed = match std::env::var("DODT_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("DODT_SEED=`{s}` is not a seed"))?,
        ),
        Err(_) => None,
    };
    if let Some(s) = env_seed.or(seed) {
        cfg.run.seeds = vec![s];
    }
    if let Some(out) = out {
        cfg.run.out_dir = out;
    }
    let out = cfg.run.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let snapshot = out.join("config.resolved.ini");
    std::fs::write(&snapshot, cfg.render())
        .with_context(|| format!("writing {}", snapshot.display()))?;
    let result = run_experiment(&cfg, algo, &out)?;
    for (seed, reports) in result.seeds.iter().zip(&result.reports) {
        let last = reports.last().expect("at least one round");
        let eval = last.eval_mean.map(|v| v.to_string()).unwrap_or_default();
        println!(
            "seed={seed} rounds={} env_steps={} final_eval={eval}",
            reports.len(),
            last.env_steps_total
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(
    dir: &Path,
    env: EnvName,
    episodes: usize,
    rtg: f64,
    seed: u64,
    dump: Option<&Path>,
) -> Result<ExitCode> {
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let ck = Checkpoint::load(dir, "odt")?;
    let model = odt_from_checkpoint(&ck)?;
    let mut env = env.make();
    let spec = env.spec().clone();
    if (spec.obs_dim, spec.act_dim) != (model.obs_dim, model.act_dim) {
        return Err(Error::DimMismatch {
            expected_obs: model.obs_dim,
            expected_act: model.act_dim,
            found_obs: spec.obs_dim,
            found_act: spec.act_dim,
        }
        .into());
    }
    let result = evaluate(env.as_mut(), &model, rtg, episodes, seed)?;
    if let Some(path) = dump {
        replay::file::save(path, &result.episodes)?;
    }
    println!(
        "eval_mean={} eval_std={} episodes={episodes}",
        result.mean, result.std
    );
    Ok(ExitCode::SUCCESS)
}

const OP_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

fn gradcheck_cmd(seed: u64, fault: Option<&str>) -> Result<ExitCode> {
    let fault = match fault {
        Some(name) => {
            Some(OpKind::from_name(name).with_context(|| format!("unknown op `{name}`"))?)
        }
        None => None,
    };
    let mut ok = true;
    for r in gradcheck::op_suite(seed, 20, 1e-5, fault)? {
        let pass = r.worst <= OP_TOL;
        ok &= pass;
        let status = if pass { "ok" } else { "FAIL" };
        println!(
            "op {:<12} worst={:.3e} trials={} {status}",
            r.kind.name(),
            r.worst,
            r.trials
        );
        if !pass {
            println!(
                "  offending op {} shapes {:?}",
                r.kind.name(),
                r.worst_shapes
            );
        }
    }
    for c in gradsuite::composite_suite(seed, 1e-5, 4)? {
        let pass = c.worst <= COMPOSITE_TOL;
        ok &= pass;
        let status = if pass { "ok" } else { "FAIL" };
        println!(
            "composite {} worst={:.3e} at={} {status}",
            c.name, c.worst, c.param
        );
    }
    println!(
        "{}",
        if ok {
            "gradcheck passed"
        } else {
            "gradcheck FAILED"
        }
    );
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn plot_cmd(files: &[PathBuf], out: &Path) -> Result<ExitCode> {
    let mut series = Vec::new();
    for f in files {
        let table = read_metrics(f)?;
        let label = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        series.push((label, table));
    }
    std::fs::write(out, plot::render_svg(&series))
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(ExitCode::SUCCESS)
}

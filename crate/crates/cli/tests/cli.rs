use std::path::Path;
use std::process::{Command, Output};

use dodt_core::config::RunConfig;
use dodt_core::replay::{self, Trajectory};
use dodt_core::trainer::{read_metrics, METRICS_HEADER};

const TINY: &str = "\
[run]
env = chain
eval_episodes = 1
[world_model]
deter = 8
stoch = 2
hidden = 8
seq_len = 5
batch = 2
[behavior]
hidden = 8
horizon = 3
imagine_starts = 4
[dreamer]
env_steps = 25
train_steps = 2
[odt]
context_len = 4
width = 8
layers = 1
heads = 2
max_timestep = 32
rtg_scale = 10
t_online = 5
eval_rtg = 5
iterations = 2
batch = 4
";

fn dodt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dodt"))
        .args(args)
        .env_remove("DODT_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.ini");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, algo: &str) -> String {
    let cfg = write_config(dir, TINY);
    let out = dir.join("out");
    let o = dodt(&[
        "train",
        "--config",
        &cfg,
        "--algo",
        algo,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

#[test]
fn one_round_writes_one_row_checkpoints_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "dodt");
    let out = Path::new(&out);
    let text = std::fs::read_to_string(out.join("metrics_seed0.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(text.lines().count(), 2);
    for m in ["odt", "world_model", "actor", "critic"] {
        assert!(
            out.join(format!("checkpoints/seed0/{m}.manifest")).exists(),
            "{m}"
        );
    }
    let snapshot = RunConfig::load(&out.join("config.resolved.ini")).unwrap();
    let mut original = RunConfig::parse(TINY).unwrap();
    original.run.out_dir = out.to_path_buf();
    assert_eq!(snapshot, original);
    assert_eq!(RunConfig::parse(&snapshot.render()).unwrap(), snapshot);
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dodt(&[
        "train",
        "--config",
        "/nonexistent/run.ini",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/run.ini"));
    assert!(!out.exists());
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\nrounds = 1\n\n[odt]\nwidth = wide\n");
    let out = dir.path().join("out");
    let o = dodt(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 5: odt.width"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn seed_environment_variable_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_dodt"))
        .args([
            "train",
            "--config",
            &cfg,
            "--algo",
            "odt",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("DODT_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics_seed11.csv").exists());
    assert!(!out.join("metrics_seed3.csv").exists());
    assert!(stdout(&o).starts_with("seed=11 rounds=1"));
}

fn parse_eval(line: &str) -> (f64, f64, usize) {
    let mut parts = line.trim().split(' ');
    let mut field = |key: &str| parts.next().unwrap().strip_prefix(key).unwrap().to_string();
    let mean = field("eval_mean=").parse().unwrap();
    let std = field("eval_std=").parse().unwrap();
    let k = field("episodes=").parse().unwrap();
    (mean, std, k)
}

#[test]
fn eval_is_deterministic_and_matches_dumped_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "odt");
    let ck = format!("{out}/checkpoints/seed0");
    let one = dodt(&[
        "eval",
        "--checkpoint",
        &ck,
        "--env",
        "chain",
        "--episodes",
        "1",
        "--rtg",
        "5",
    ]);
    assert!(one.status.success(), "{}", stderr(&one));
    assert_eq!(parse_eval(&stdout(&one)).1, 0.0);

    let dump = dir.path().join("eval.traj");
    let args = [
        "eval",
        "--checkpoint",
        &ck,
        "--env",
        "chain",
        "--episodes",
        "4",
        "--rtg",
        "-3.5",
        "--seed",
        "7",
    ];
    let a = dodt(&[&args[..], &["--dump-episodes", dump.to_str().unwrap()]].concat());
    let b = dodt(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let (mean, _, k) = parse_eval(&stdout(&a));
    assert_eq!(k, 4);
    let (_, _, episodes) = replay::file::load(&dump).unwrap();
    assert_eq!(episodes.len(), 4);
    let recomputed = episodes.iter().map(Trajectory::total_return).sum::<f64>() / 4.0;
    assert!((recomputed - mean).abs() <= 1e-9 * mean.abs().max(1.0));
}

#[test]
fn eval_rejects_mismatched_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "odt");
    let o = dodt(&[
        "eval",
        "--checkpoint",
        &format!("{out}/checkpoints/seed0"),
        "--env",
        "pendulum",
        "--rtg",
        "0",
    ]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(
        e.contains("obs_dim=5 act_dim=1") && e.contains("obs_dim=3 act_dim=1"),
        "{e}"
    );
}

#[test]
fn gradcheck_passes_and_is_stable() {
    let a = dodt(&["gradcheck"]);
    let b = dodt(&["gradcheck"]);
    assert!(a.status.success(), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).lines().any(|l| l.starts_with("op tanh")));
    assert!(stdout(&a)
        .lines()
        .any(|l| l.starts_with("composite odt_nll")));
}

#[test]
fn gradcheck_names_a_corrupted_op() {
    let o = dodt(&["gradcheck", "--inject-fault", "tanh"]);
    assert!(!o.status.success());
    let out = stdout(&o);
    let failing: Vec<&str> = out.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{out}");
    assert!(failing[0].starts_with("op tanh"));
    assert!(out.contains("offending op tanh shapes"));
}

#[test]
fn plot_draws_each_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "dodt");
    let metrics = format!("{out}/metrics_seed0.csv");
    let rows = read_metrics(Path::new(&metrics)).unwrap().rows.len();
    let svg = dir.path().join("fig.svg");
    let o = dodt(&[
        "plot",
        "--metrics",
        &metrics,
        &format!("{out}/summary.csv"),
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches("class=\"legend-entry\"").count(), 2);
    assert!(text.contains(&format!("data-points=\"{rows}\"")));
}

#[test]
fn plot_reports_malformed_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let ok = "1,400,,,,,,,,,,,,";
    std::fs::write(
        &csv,
        format!(
            "{}\n{ok}\n{ok}\n3,1200,oops,,,,,,,,,,,\n",
            METRICS_HEADER.join(",")
        ),
    )
    .unwrap();
    let o = dodt(&[
        "plot",
        "--metrics",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("f.svg").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

use std::io::Write as _;
use std::path::Path;

use super::metrics::{render_row, summarize_seeds, MetricsTable, METRICS_HEADER};
use super::{Algo, RoundReport, Trainer};
use crate::config::RunConfig;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub seeds: Vec<u64>,
    pub reports: Vec<Vec<RoundReport>>,
    pub summary: MetricsTable,
}

/// Runs one seed to completion, appending a metrics row to `metrics_path`
/// after every round so finished rounds survive a later failure.
pub fn run_seed(
    cfg: &RunConfig,
    algo: Algo,
    seed: u64,
    metrics_path: &Path,
) -> Result<(Trainer, Vec<RoundReport>)> {
    let io = |e: std::io::Error| Error::from(e).in_file(metrics_path);
    let mut file = std::fs::File::create(metrics_path).map_err(io)?;
    writeln!(file, "{}", METRICS_HEADER.join(",")).map_err(io)?;
    let mut trainer = Trainer::new(cfg, algo, seed)?;
    let mut reports = Vec::new();
    while !trainer.finished() {
        let report = trainer.run_round()?;
        file.write_all(render_row(&report.metrics_row()).as_bytes())
            .map_err(io)?;
        file.flush().map_err(io)?;
        reports.push(report);
    }
    Ok((trainer, reports))
}

/// Runs every seed of `cfg` under `algo`, writing into `out`:
/// `metrics_seed<n>.csv`, `summary.csv` (per-round medians across seeds)
/// and `checkpoints/seed<n>/`.
pub fn run_experiment(cfg: &RunConfig, algo: Algo, out: &Path) -> Result<ExperimentResult> {
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).in_file(out))?;
    let mut reports = Vec::new();
    let mut tables = Vec::new();
    for &seed in &cfg.run.seeds {
        let path = out.join(format!("metrics_seed{seed}.csv"));
        let (trainer, rs) = run_seed(cfg, algo, seed, &path)?;
        let ck_dir = out.join("checkpoints").join(format!("seed{seed}"));
        for ck in trainer.checkpoints() {
            ck.save(&ck_dir)?;
        }
        tables.push(MetricsTable {
            rows: rs.iter().map(RoundReport::metrics_row).collect(),
        });
        reports.push(rs);
    }
    let summary = MetricsTable {
        rows: summarize_seeds(&tables),
    };
    let path = out.join("summary.csv");
    std::fs::write(&path, super::render_metrics(&summary.rows))
        .map_err(|e| Error::from(e).in_file(&path))?;
    Ok(ExperimentResult {
        seeds: cfg.run.seeds.clone(),
        reports,
        summary,
    })
}

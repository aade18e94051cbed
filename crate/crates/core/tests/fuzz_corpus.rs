//! The checked-in fuzz seeds must be valid inputs, otherwise the fuzzers
//! start from nothing but parse errors.

use std::path::{Path, PathBuf};

use dodt_core::checkpoint::Manifest;
use dodt_core::config::RunConfig;
use dodt_core::replay::file;
use dodt_core::trainer::{parse_metrics, render_metrics};

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn config_seeds_parse_and_round_trip() {
    for (path, text) in seeds("config") {
        let cfg = RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}

#[test]
fn trajectory_seeds_parse_and_round_trip() {
    for (path, text) in seeds("trajectory_file") {
        let (_, _, trajs) =
            file::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let (_, _, again) = file::parse(&file::render(&trajs).unwrap()).unwrap();
        assert_eq!(again, trajs);
    }
}

#[test]
fn manifest_seeds_parse_and_round_trip() {
    for (path, text) in seeds("checkpoint_manifest") {
        let m = Manifest::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }
}

#[test]
fn metrics_seeds_parse_and_round_trip() {
    for (path, text) in seeds("metrics_csv") {
        let table = parse_metrics(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(parse_metrics(&render_metrics(&table.rows)).unwrap(), table);
    }
}

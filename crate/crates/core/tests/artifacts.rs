use std::collections::BTreeMap;

use dodt_core::checkpoint::{Checkpoint, Manifest};
use dodt_core::config::RunConfig;
use dodt_core::odt::{OdtConfig, Transformer};
use dodt_core::plot::render_svg;
use dodt_core::rng;
use dodt_core::tokens::TokenSequence;
use dodt_core::trainer::{
    odt_checkpoint, odt_from_checkpoint, parse_metrics, render_metrics, MetricsTable,
};
use proptest::prelude::*;

fn small_odt(seed: u64) -> Transformer {
    let cfg = OdtConfig {
        context_len: 4,
        width: 8,
        layers: 1,
        heads: 2,
        max_timestep: 16,
        ..OdtConfig::default()
    };
    Transformer::new(cfg, 3, 1, &mut rng::stream(seed, &[])).unwrap()
}

#[test]
fn odt_checkpoint_save_load_save_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let model = small_odt(1);
    odt_checkpoint(&model, BTreeMap::new())
        .save(a.path())
        .unwrap();
    let loaded = Checkpoint::load(a.path(), "odt").unwrap();
    let rebuilt = odt_from_checkpoint(&loaded).unwrap();
    odt_checkpoint(&rebuilt, BTreeMap::new())
        .save(b.path())
        .unwrap();
    for f in ["odt.manifest", "odt.params"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let manifest =
        Manifest::parse(&std::fs::read_to_string(a.path().join("odt.manifest")).unwrap()).unwrap();
    let mut end = 0;
    for t in &manifest.tensors {
        assert_eq!(t.offset, end);
        end += 4 * t.shape.iter().product::<usize>();
    }
    assert_eq!(
        end as u64,
        std::fs::metadata(a.path().join("odt.params"))
            .unwrap()
            .len()
    );

    // Predictions survive the 32-bit round trip up to float rounding.
    let seq =
        TokenSequence::left_padded(4, &[1.0], &[vec![0.1, 0.2, 0.3]], &[vec![0.0]], &[0]).unwrap();
    let (m0, _) = model.predict(&seq).unwrap();
    let (m1, _) = rebuilt.predict(&seq).unwrap();
    assert!((m0[0] - m1[0]).abs() < 1e-5);
}

#[test]
fn truncated_params_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    odt_checkpoint(&small_odt(2), BTreeMap::new())
        .save(dir.path())
        .unwrap();
    let p = dir.path().join("odt.params");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.pop();
    std::fs::write(&p, bytes).unwrap();
    let err = Checkpoint::load(dir.path(), "odt").unwrap_err().to_string();
    assert!(err.contains("odt.params"), "{err}");
}

#[test]
fn config_file_errors_name_the_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ini");
    std::fs::write(&p, "[run]\nrounds = 2\n[odt]\nwidht = 3\n").unwrap();
    let err = RunConfig::load(&p).unwrap_err().to_string();
    assert!(
        err.ends_with("line 4: unknown key `widht` in [odt]"),
        "{err}"
    );
    assert!(err.contains("bad.ini"));
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        prop::collection::vec(any::<u64>(), 1..4),
        1usize..500,
        -1e4f64..1e4,
        1e-7f64..1e-1,
        prop::bool::ANY,
        prop::sample::select(vec!["oldest", "lowest_reward", "auto"]),
        0.01f64..0.999,
        prop::option::of("[a-z]{1,8}"),
    )
        .prop_map(|(seeds, rounds, rtg, lr, sgd, eviction, gamma, offline)| {
            let mut c = RunConfig::default();
            c.run.seeds = seeds;
            c.run.rounds = rounds;
            c.run.plain_sgd = sgd;
            c.run.offline_path = offline.map(Into::into);
            c.behavior.plain_sgd = sgd;
            c.behavior.gamma = gamma;
            c.odt.plain_sgd = sgd;
            c.odt.t_online = rtg;
            c.odt.lr = lr;
            c.dodt.eviction = eviction.parse().unwrap();
            c
        })
}

proptest! {
    #[test]
    fn rendered_config_reparses_identically(cfg in arb_config()) {
        prop_assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn metrics_round_trip(rows in prop::collection::vec(prop::collection::vec(prop::option::of(-1e6f64..1e6), 12), 0..20)) {
        let rows: Vec<[Option<f64>; 14]> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut out = [None; 14];
                out[0] = Some(i as f64 + 1.0);
                out[1] = Some(100.0 * i as f64);
                out[2..].copy_from_slice(r);
                out
            })
            .collect();
        let parsed = parse_metrics(&render_metrics(&rows)).unwrap();
        prop_assert_eq!(parsed.rows, rows);
    }
}

fn table(n: usize, offset: f64) -> MetricsTable {
    let rows = (0..n)
        .map(|i| {
            let mut r = [None; 14];
            r[0] = Some(i as f64 + 1.0);
            r[1] = Some(400.0 * (i as f64 + 1.0));
            r[3] = Some(-1000.0 + 50.0 * i as f64 + offset);
            r[5] = Some(i as f64);
            r
        })
        .collect();
    MetricsTable { rows }
}

#[test]
fn plot_has_one_point_per_row_and_a_legend_entry_per_file() {
    let one = render_svg(&[("dodt".into(), table(7, 0.0))]);
    assert_eq!(one.matches("<polyline class=\"curve\"").count(), 1);
    assert_eq!(one.matches("class=\"bar-panel\"").count(), 1);
    assert!(one.contains("data-points=\"7\""));
    let pts = one
        .split("points=\"")
        .last()
        .unwrap()
        .split('"')
        .next()
        .unwrap()
        .split_whitespace()
        .count();
    assert_eq!(pts, 7);
    assert_eq!(one.matches("<rect class=\"bar\"").count(), 7);

    let two = render_svg(&[
        ("dodt".into(), table(5, 0.0)),
        ("odt".into(), table(9, -100.0)),
    ]);
    assert_eq!(two.matches("class=\"legend-entry\"").count(), 2);
    assert_eq!(two.matches("<polyline class=\"curve\"").count(), 2);
    assert_eq!(
        render_svg(&[("dodt".into(), table(5, 0.0))]),
        render_svg(&[("dodt".into(), table(5, 0.0))])
    );
}

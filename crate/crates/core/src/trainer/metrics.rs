//! Metrics CSV files: one row per round, empty cells for missing values.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 14] = [
    "round",
    "env_steps_total",
    "dreamer_return",
    "odt_eval_mean",
    "odt_eval_std",
    "benefited_count",
    "wm_recon",
    "wm_kl",
    "wm_reward",
    "actor_loss",
    "value_loss",
    "odt_nll",
    "odt_entropy",
    "wall_clock_s",
];

pub type MetricsRow = [Option<f64>; 14];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn column_index(name: &str) -> Option<usize> {
        METRICS_HEADER.iter().position(|&h| h == name)
    }

    /// Values of one column; panics on an unknown name.
    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        let i = Self::column_index(name).unwrap_or_else(|| panic!("no metrics column `{name}`"));
        self.rows.iter().map(|r| r[i]).collect()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut s = METRICS_HEADER.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|&v| cell(v)).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

pub(crate) fn render_row(r: &MetricsRow) -> String {
    let cells: Vec<String> = r.iter().map(|&v| cell(v)).collect();
    cells.join(",") + "\n"
}

/// Parses a metrics file; errors name the 1-based data row.
pub fn parse_metrics(text: &str) -> Result<MetricsTable> {
    let bad = |row: usize, msg: String| Error::InvalidArgument(format!("row {row}: {msg}"));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(0, e.to_string()))?;
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(bad(0, "header does not match the metrics schema".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let n = i + 1;
        let rec = rec.map_err(|e| bad(n, e.to_string()))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(bad(
                n,
                format!("{} fields, expected {}", rec.len(), METRICS_HEADER.len()),
            ));
        }
        let mut row = [None; 14];
        for (j, field) in rec.iter().enumerate() {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                bad(
                    n,
                    format!("bad value `{field}` in column {}", METRICS_HEADER[j]),
                )
            })?;
            row[j] = Some(v);
        }
        if row[0].is_none() || row[1].is_none() {
            return Err(bad(n, "round and env_steps_total are required".into()));
        }
        rows.push(row);
    }
    Ok(MetricsTable { rows })
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_metrics(&text).map_err(|e| e.in_file(path))
}

/// Median of the values; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Per-round medians across seeds, column by column, ignoring empty cells.
/// Row `i` of the result summarizes row `i` of every table that has one.
pub fn summarize_seeds(tables: &[MetricsTable]) -> Vec<MetricsRow> {
    let rounds = tables.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    (0..rounds)
        .map(|i| {
            let mut out = [None; 14];
            for (j, slot) in out.iter_mut().enumerate() {
                let vals: Vec<f64> = tables
                    .iter()
                    .filter_map(|t| t.rows.get(i).and_then(|r| r[j]))
                    .collect();
                *slot = median(&vals);
            }
            out
        })
        .collect()
}

/// First `env_steps_total` at which the eval mean reached `threshold`.
pub fn steps_to_reach(table: &MetricsTable, threshold: f64) -> Option<f64> {
    let (s, m) = (1, 3);
    table
        .rows
        .iter()
        .find(|r| r[m].is_some_and(|v| v >= threshold))
        .and_then(|r| r[s])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut r = [None; 14];
        r[0] = Some(1.0);
        r[1] = Some(400.0);
        r[3] = Some(-812.25);
        r[11] = Some(0.1);
        let text = render_metrics(&[r]);
        assert_eq!(text.lines().nth(1).unwrap(), "1,400,,-812.25,,,,,,,,0.1,,");
        assert_eq!(parse_metrics(&text).unwrap().rows, vec![r]);
    }

    #[test]
    fn errors_carry_row() {
        let head = METRICS_HEADER.join(",");
        let ok = "1,2,,,,,,,,,,,,";
        let e = parse_metrics(&format!("{head}\n{ok}\n1,2,x,,,,,,,,,,,\n")).unwrap_err();
        assert_eq!(
            e.to_string(),
            "row 2: bad value `x` in column dreamer_return"
        );
        let e = parse_metrics(&format!("{head}\n{ok}\n{ok}\n1,2\n")).unwrap_err();
        assert_eq!(e.to_string(), "row 3: 2 fields, expected 14");
        assert!(parse_metrics("a,b\n").is_err());
    }

    #[test]
    fn median_oracle() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn threshold_crossing() {
        let row = |s: f64, m: Option<f64>| {
            let mut r = [None; 14];
            r[0] = Some(1.0);
            r[1] = Some(s);
            r[3] = m;
            r
        };
        let t = MetricsTable {
            rows: vec![
                row(100.0, Some(-900.0)),
                row(200.0, None),
                row(300.0, Some(-250.0)),
            ],
        };
        assert_eq!(steps_to_reach(&t, -300.0), Some(300.0));
        assert_eq!(steps_to_reach(&t, 0.0), None);
    }
}

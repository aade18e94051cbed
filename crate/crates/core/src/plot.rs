//! SVG figures from metrics files: eval return against environment steps
//! (one curve per series) above a grouped bar panel of benefited counts per
//! round.

use std::fmt::Write as _;

use crate::trainer::MetricsTable;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 640.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

struct Panel {
    top: f64,
    height: f64,
}

impl Panel {
    fn plot_width() -> f64 {
        WIDTH - LEFT - RIGHT
    }
}

struct Scale {
    lo: f64,
    hi: f64,
}

impl Scale {
    fn over(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            let pad = lo.abs().max(1.0) * 0.05;
            return Self {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        Self { lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn axes(out: &mut String, p: &Panel, x: &Scale, y: &Scale, title: &str, xlabel: &str) {
    let (x0, x1) = (LEFT, LEFT + Panel::plot_width());
    let (y0, y1) = (p.top + p.height, p.top);
    writeln!(
        out,
        r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        x1 - x0,
        p.height
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{x0}" y="{}" font-size="14">{}</text>"#,
        y1 - 8.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        y0 + 32.0,
        escape(xlabel)
    )
    .unwrap();
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let ty = y0 - f * p.height;
        let tx = x0 + f * Panel::plot_width();
        writeln!(
            out,
            r#"<text x="{}" y="{ty:.2}" font-size="10" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            fmt_tick(y.lo + f * (y.hi - y.lo))
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{tx:.2}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
            y0 + 14.0,
            fmt_tick(x.lo + f * (x.hi - x.lo))
        )
        .unwrap();
    }
}

/// Renders the two-panel figure. Curve points are the rows with an eval
/// mean; bars are drawn for rows with a benefited count.
pub fn render_svg(series: &[(String, MetricsTable)]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();

    let curve = Panel {
        top: 40.0,
        height: 300.0,
    };
    let points = |t: &MetricsTable| -> Vec<(f64, f64)> {
        t.rows.iter().filter_map(|r| Some((r[1]?, r[3]?))).collect()
    };
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, t)| points(t)).collect();
    let xs = Scale::over(all.iter().map(|p| p.0));
    let ys = Scale::over(all.iter().map(|p| p.1));
    axes(
        &mut out,
        &curve,
        &xs,
        &ys,
        "eval return",
        "environment steps",
    );
    for (i, (label, t)) in series.iter().enumerate() {
        let pts: Vec<String> = points(t)
            .iter()
            .map(|&(x, y)| {
                let px = LEFT + xs.frac(x) * Panel::plot_width();
                let py = curve.top + curve.height - ys.frac(y) * curve.height;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        writeln!(
            out,
            r#"<polyline class="curve" data-series="{}" data-points="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(label),
            pts.len(),
            COLORS[i % COLORS.len()],
            pts.join(" ")
        )
        .unwrap();
    }

    let bars = Panel {
        top: 420.0,
        height: 170.0,
    };
    let counts = |t: &MetricsTable| -> Vec<(f64, f64)> {
        t.rows.iter().filter_map(|r| Some((r[0]?, r[5]?))).collect()
    };
    let rounds = series
        .iter()
        .flat_map(|(_, t)| counts(t))
        .map(|c| c.0)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let max_count = series
        .iter()
        .flat_map(|(_, t)| counts(t))
        .map(|c| c.1)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let xb = Scale {
        lo: 0.5,
        hi: rounds + 0.5,
    };
    let yb = Scale {
        lo: 0.0,
        hi: max_count,
    };
    axes(
        &mut out,
        &bars,
        &xb,
        &yb,
        "benefited trajectories per round",
        "round",
    );
    writeln!(out, r#"<g class="bar-panel">"#).unwrap();
    let slot = Panel::plot_width() / rounds;
    let bar_w = slot * 0.8 / series.len().max(1) as f64;
    for (i, (label, t)) in series.iter().enumerate() {
        for (round, count) in counts(t) {
            let x = LEFT + xb.frac(round) * Panel::plot_width() - slot * 0.4 + i as f64 * bar_w;
            let h = yb.frac(count) * bars.height;
            writeln!(
                out,
                r#"<rect class="bar" data-series="{}" x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{}"/>"#,
                escape(label),
                bars.top + bars.height - h,
                COLORS[i % COLORS.len()]
            )
            .unwrap();
        }
    }
    writeln!(out, "</g>").unwrap();

    writeln!(out, r#"<g class="legend">"#).unwrap();
    for (i, (label, _)) in series.iter().enumerate() {
        let y = 60.0 + 20.0 * i as f64;
        let x = WIDTH - RIGHT + 15.0;
        writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#,
            y - 10.0,
            COLORS[i % COLORS.len()]
        )
        .unwrap();
        writeln!(
            out,
            r#"<text class="legend-entry" x="{}" y="{y}" font-size="12">{}</text>"#,
            x + 18.0,
            escape(label)
        )
        .unwrap();
    }
    writeln!(out, "</g>").unwrap();
    out.push_str("</svg>\n");
    out
}

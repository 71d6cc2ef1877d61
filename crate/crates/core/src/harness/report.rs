//! Metrics CSV files and SVG learning curves.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Metrics, Result};

/// One evaluation point of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_length: f64,
    pub std_length: f64,
    pub success_rate: f64,
    pub efficiency: f64,
}

impl MetricsRow {
    pub fn new(step: u64, m: &Metrics) -> MetricsRow {
        MetricsRow {
            step,
            mean_reward: m.mean_reward,
            std_reward: m.std_reward,
            mean_length: m.mean_length,
            std_length: m.std_length,
            success_rate: m.success_rate,
            efficiency: m.efficiency,
        }
    }
}

pub const CSV_HEADER: &str =
    "step,mean_reward,std_reward,mean_length,std_length,success_rate,efficiency";

/// Floats use the shortest representation that parses back to the same bits.
pub fn emit_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.mean_reward,
            r.std_reward,
            r.mean_length,
            r.std_length,
            r.success_rate,
            r.efficiency
        );
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(HarnessError::Config(
                "metrics CSV has an unexpected header".into(),
            ))
        }
    }
    let mut rows = vec![];
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| HarnessError::Config(format!("metrics CSV line {}: {what}", n + 2));
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let f = |i: usize| cells[i].parse::<f64>().map_err(|_| bad(cells[i]));
        rows.push(MetricsRow {
            step: cells[0].parse().map_err(|_| bad(cells[0]))?,
            mean_reward: f(1)?,
            std_reward: f(2)?,
            mean_length: f(3)?,
            std_length: f(4)?,
            success_rate: f(5)?,
            efficiency: f(6)?,
        });
    }
    Ok(rows)
}

/// Trailing rolling mean; the first `window - 1` points average what exists.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub const SMOOTHING_WINDOW: usize = 2;

/// `(name, [(step, mean, std)])` for each reported metric.
pub fn metric_series(rows: &[MetricsRow]) -> Vec<(&'static str, Vec<(u64, f64, f64)>)> {
    let series = |f: &dyn Fn(&MetricsRow) -> (f64, f64)| -> Vec<(u64, f64, f64)> {
        rows.iter()
            .map(|r| {
                let (m, s) = f(r);
                (r.step, m, s)
            })
            .collect()
    };
    vec![
        ("mean_reward", series(&|r| (r.mean_reward, r.std_reward))),
        ("mean_length", series(&|r| (r.mean_length, r.std_length))),
        (
            "success_rate",
            series(&|r| {
                (
                    r.success_rate,
                    (r.success_rate * (1.0 - r.success_rate)).max(0.0).sqrt(),
                )
            }),
        ),
        ("efficiency", series(&|r| (r.efficiency, 0.0))),
    ]
}

pub fn emit_series_csv(points: &[(u64, f64, f64)]) -> String {
    let mut s = String::from("step,mean,std\n");
    for (step, m, sd) in points {
        let _ = writeln!(s, "{step},{m},{sd}");
    }
    s
}

/// Line chart of the smoothed means with an unsmoothed std band.
pub fn svg_chart(title: &str, points: &[(u64, f64, f64)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let means: Vec<f64> = points.iter().map(|p| p.1).collect();
    let smoothed = smooth(&means, SMOOTHING_WINDOW);
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let finite = |v: &f64| v.is_finite();
    let (xmin, xmax) = bounds(xs.iter().copied().filter(finite));
    let (ymin, ymax) = bounds(
        points
            .iter()
            .flat_map(|p| [p.1 - p.2, p.1 + p.2])
            .chain(smoothed.iter().copied())
            .filter(finite),
    );
    let sx = |x: f64| PAD + (x - xmin) / (xmax - xmin) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - ymin) / (ymax - ymin) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, x, y, anchor) in [
        (xmin, PAD, H - PAD + 16.0, "start"),
        (xmax, W - PAD, H - PAD + 16.0, "end"),
        (ymin, PAD - 4.0, H - PAD, "end"),
        (ymax, PAD - 4.0, PAD + 4.0, "end"),
    ] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{}</text>"#,
            short(v)
        );
    }
    if points.len() > 1 {
        let upper: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.1 + p.2)))
            .collect();
        let lower: Vec<String> = points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.1 - p.2)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{} {}" fill="#1f77b4" fill-opacity="0.15" stroke="none"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = xs
            .iter()
            .zip(&smoothed)
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            line.join(" ")
        );
    }
    for (&x, &y) in xs.iter().zip(&smoothed) {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            sx(x),
            sy(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn short(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `final_report/{metric}.csv` and `{metric}.svg` for a run directory.
pub fn report(run: &Path) -> Result<Vec<std::path::PathBuf>> {
    let csv = std::fs::read_to_string(run.join("metrics.csv"))
        .map_err(|e| HarnessError::Config(format!("{}: {e}", run.join("metrics.csv").display())))?;
    let rows = parse_csv(&csv)?;
    if rows.is_empty() {
        return Err(HarnessError::Config("metrics.csv has no rows".into()));
    }
    let out = run.join("final_report");
    std::fs::create_dir_all(&out)?;
    let mut written = vec![];
    for (name, pts) in metric_series(&rows) {
        let c = out.join(format!("{name}.csv"));
        std::fs::write(&c, emit_series_csv(&pts))?;
        let g = out.join(format!("{name}.svg"));
        std::fs::write(&g, svg_chart(name, &pts))?;
        written.push(c);
        written.push(g);
    }
    Ok(written)
}

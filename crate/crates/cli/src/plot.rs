//! Static SVG line plots of sweep results, rendered purely from the sweep CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// One row of a sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: String,
    pub value: f64,
    pub mode: String,
    pub k: usize,
    pub beta: f64,
    pub lambda_d: f64,
    pub fraction: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SweepRecord>, _>>()
        .with_context(|| format!("malformed sweep file {}", path.display()))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy and robustness (percent) against the swept value, one pair of
/// curves per transfer mode. Identical rows always give identical bytes.
pub fn render_svg(rows: &[SweepRecord]) -> Result<String> {
    if rows.is_empty() {
        bail!("no sweep rows to plot");
    }
    let axis = &rows[0].axis;
    let mut by_mode: BTreeMap<&str, Vec<&SweepRecord>> = BTreeMap::new();
    for r in rows {
        by_mode.entry(&r.mode).or_default().push(r);
    }
    for pts in by_mode.values_mut() {
        pts.sort_by(|a, b| a.value.total_cmp(&b.value));
    }
    let (mut lo, mut hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r.value), h.max(r.value)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + (v - lo) / (hi - lo) * plot_w;
    let py = |acc: f64| TOP + (1.0 - acc) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;
    writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">accuracy and robustness vs {}</text>"#,
        LEFT + plot_w / 2.0,
        escape(axis)
    )?;
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = py(acc);
        writeln!(
            s,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            LEFT + plot_w
        )?;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            (acc * 100.0).round()
        )?;
    }
    let mut ticks: Vec<f64> = rows.iter().map(|r| r.value).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for v in ticks {
        let x = px(v);
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v}</text>"#,
            TOP + plot_h + 18.0
        )?;
    }
    writeln!(
        s,
        r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="black"/>"#
    )?;
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(axis)
    )?;
    writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )?;

    let mut legend_y = TOP + 10.0;
    for (i, (mode, pts)) in by_mode.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for (metric, dash, get) in [
            ("clean", "", (|r: &SweepRecord| r.clean_acc) as fn(&SweepRecord) -> f64),
            ("robust", r#" stroke-dasharray="6 4""#, |r: &SweepRecord| r.robust_acc),
        ] {
            let path: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.value), py(get(r)))).collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                path.join(" ")
            )?;
            for r in pts {
                writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(r.value),
                    py(get(r))
                )?;
            }
            let lx = LEFT + plot_w + 12.0;
            writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{color}" stroke-width="2"{dash}/>"#,
                lx + 24.0
            )?;
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{} {metric}</text>"#,
                lx + 30.0,
                legend_y + 4.0,
                escape(mode)
            )?;
            legend_y += 18.0;
        }
    }
    writeln!(s, "</svg>")?;
    Ok(s)
}

/// Re-renders the plot beside a sweep CSV (same stem, `.svg`).
pub fn replot(csv_path: &Path) -> Result<std::path::PathBuf> {
    let svg = render_svg(&read_sweep_csv(csv_path)?)?;
    let out = csv_path.with_extension("svg");
    std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(out)
}

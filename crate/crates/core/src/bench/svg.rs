//! Minimal SVG line plots. Everything drawn here comes from rows that are
//! also written as CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

use super::sweep::SweepRow;
use crate::engine::TraceLog;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Vertical dashed lines at these x values.
    pub markers: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(pts().map(|p| p.0).chain(self.markers.iter().copied()));
        let (y0, y1) = bounds(pts().map(|p| p.1));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(&self.title));
        let _ = writeln!(
            out,
            r#"<path d="M{m} {top} V{b} H{r}" fill="none" stroke="black"/>"#,
            m = MARGIN,
            top = MARGIN,
            b = H - MARGIN,
            r = W - MARGIN
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), H - MARGIN + 16.0, tick(xv));
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, sy(yv) + 4.0, tick(yv));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(&self.x_label));
        let _ = writeln!(
            out,
            r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
            escape(&self.y_label),
            y = H / 2.0
        );
        for &m in &self.markers {
            let _ = writeln!(
                out,
                r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
                MARGIN,
                H - MARGIN,
                x = sx(m)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let d: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
            for &(x, y) in &s.points {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = MARGIN + 14.0 * i as f64;
            let _ = writeln!(out, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, W - MARGIN - 120.0, escape(&s.name));
        }
        out.push_str("</svg>\n");
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_svg())?;
        Ok(())
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// Entropy against step for a vanilla and a flashmem trace of the same
/// prompt, with the flashmem triggers marked.
pub fn entropy_plot(vanilla: &TraceLog, flashmem: &TraceLog, title: &str) -> LinePlot {
    let series = |name: &str, log: &TraceLog| Series {
        name: name.into(),
        points: log.steps.iter().map(|s| (s.step as f64, s.entropy)).collect(),
    };
    LinePlot {
        title: title.into(),
        x_label: "step".into(),
        y_label: "attention entropy (nats)".into(),
        series: vec![series("vanilla", vanilla), series("flashmem", flashmem)],
        markers: flashmem.trigger_steps().into_iter().map(|t| t as f64).collect(),
    }
}

/// Latency and parameter count against consolidator depth, one plot each.
pub fn depth_plots(rows: &[SweepRow]) -> (LinePlot, LinePlot) {
    let pts = |f: fn(&SweepRow) -> f64| rows.iter().map(|r| (r.layers as f64, f(r))).collect::<Vec<_>>();
    let latency = LinePlot {
        title: "consolidation latency vs depth".into(),
        x_label: "consolidator layers L".into(),
        y_label: "ms per consolidation".into(),
        series: vec![Series { name: "latency".into(), points: pts(|r| r.consolidation_ms) }],
        markers: Vec::new(),
    };
    let params = LinePlot {
        title: "parameters and accuracy vs depth".into(),
        x_label: "consolidator layers L".into(),
        y_label: "trainable parameters".into(),
        series: vec![Series { name: "param_count".into(), points: pts(|r| r.param_count as f64) }],
        markers: Vec::new(),
    };
    (latency, params)
}

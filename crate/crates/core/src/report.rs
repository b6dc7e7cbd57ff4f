//! Minimal hand-written SVG plots. Output depends only on the inputs, so
//! reruns are byte-identical.

use std::fmt::Write as _;

use crate::profile::LayerProfile;
use crate::search::ParetoPoint;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        let pad = if hi > lo { (hi - lo) * 0.08 } else { lo.abs().max(1.0) * 0.05 };
        Self {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
    }
}

fn px(a: &Axis, v: f64) -> f64 {
    LEFT + a.frac(v) * (W - LEFT - RIGHT)
}

fn py(a: &Axis, v: f64) -> f64 {
    H - BOTTOM - a.frac(v) * (H - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    writeln!(out, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0).unwrap();
}

fn x_axis(out: &mut String, a: &Axis, label: &str, integer: bool) {
    for t in a.ticks(5) {
        let x = px(a, t);
        let text = if integer { format!("{}", t.round()) } else { format!("{t:.2}") };
        writeln!(out, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, H - BOTTOM, H - BOTTOM + 5.0).unwrap();
        writeln!(out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{text}</text>"#, H - BOTTOM + 18.0).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, escape(label)).unwrap();
}

fn y_axis(out: &mut String, a: &Axis, label: &str, right: bool, color: &str) {
    let x = if right { W - RIGHT } else { LEFT };
    let (tick, anchor, lx) = if right { (5.0, "start", x + 8.0) } else { (-5.0, "end", x - 8.0) };
    for t in a.ticks(5) {
        let y = py(a, t);
        writeln!(out, r#"<line x1="{x}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="{color}"/>"#, x + tick).unwrap();
        writeln!(out, r#"<text x="{lx}" y="{:.2}" text-anchor="{anchor}" fill="{color}">{t:.2}</text>"#, y + 4.0).unwrap();
    }
    let cx = if right { W - 18.0 } else { 18.0 };
    let cy = H / 2.0;
    writeln!(
        out,
        r#"<text x="{cx}" y="{cy}" text-anchor="middle" fill="{color}" transform="rotate(-90 {cx} {cy})">{}</text>"#,
        escape(label)
    )
    .unwrap();
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, class: &str) {
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    writeln!(out, r#"<g class="series {class}">"#).unwrap();
    writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" ")).unwrap();
    for (x, y) in pts {
        writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#).unwrap();
    }
    writeln!(out, "</g>").unwrap();
}

/// Single-layer quantization profile: AI on the left axis and accuracy (%)
/// on the right, one series each, against layer index.
pub fn profile_svg(profile: &LayerProfile) -> String {
    let mut out = String::new();
    let title = format!("Single-layer {}-bit quantization", profile.bits.bits());
    header(&mut out, &title);
    let n = profile.rows.len().max(1);
    let xa = Axis {
        lo: -0.5,
        hi: n as f64 - 0.5,
    };
    let ai = Axis::fit(profile.rows.iter().map(|r| r.ai));
    let acc = Axis::fit(profile.rows.iter().map(|r| r.accuracy * 100.0));
    x_axis(&mut out, &xa, "quantized layer index", true);
    y_axis(&mut out, &ai, "arithmetic intensity (FLOPs/byte)", false, "#1f77b4");
    y_axis(&mut out, &acc, "accuracy (%)", true, "#d62728");
    let ai_pts: Vec<(f64, f64)> = profile.rows.iter().map(|r| (px(&xa, r.coord as f64), py(&ai, r.ai))).collect();
    let acc_pts: Vec<(f64, f64)> = profile
        .rows
        .iter()
        .map(|r| (px(&xa, r.coord as f64), py(&acc, r.accuracy * 100.0)))
        .collect();
    polyline(&mut out, &ai_pts, "#1f77b4", "ai");
    polyline(&mut out, &acc_pts, "#d62728", "accuracy");
    out.push_str("</svg>\n");
    out
}

/// A labelled reference point such as a uniform-precision baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub label: String,
    pub ai: f64,
    pub accuracy: f64,
}

/// Accuracy (%) against AI for sweep results. Non-dominated points are
/// joined into the frontier; dominated points are drawn hollow.
pub fn pareto_svg(points: &[ParetoPoint], references: &[Reference]) -> String {
    let mut out = String::new();
    header(&mut out, "Accuracy vs arithmetic intensity");
    let ais = points.iter().map(|p| p.record.ai).chain(references.iter().map(|r| r.ai));
    let accs = points
        .iter()
        .map(|p| p.record.accuracy * 100.0)
        .chain(references.iter().map(|r| r.accuracy * 100.0));
    let xa = Axis::fit(ais);
    let ya = Axis::fit(accs);
    x_axis(&mut out, &xa, "arithmetic intensity (FLOPs/byte)", false);
    y_axis(&mut out, &ya, "accuracy (%)", false, "black");
    let mut frontier: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| !p.dominated)
        .map(|p| (p.record.ai, p.record.accuracy * 100.0))
        .collect();
    frontier.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    frontier.dedup();
    let pts: Vec<(f64, f64)> = frontier.iter().map(|(a, c)| (px(&xa, *a), py(&ya, *c))).collect();
    polyline(&mut out, &pts, "#2ca02c", "frontier");
    writeln!(out, r#"<g class="series dominated">"#).unwrap();
    for p in points.iter().filter(|p| p.dominated) {
        let (x, y) = (px(&xa, p.record.ai), py(&ya, p.record.accuracy * 100.0));
        writeln!(out, r##"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="none" stroke="#2ca02c"/>"##).unwrap();
    }
    writeln!(out, "</g>").unwrap();
    writeln!(out, r#"<g class="series references">"#).unwrap();
    for r in references {
        let (x, y) = (px(&xa, r.ai), py(&ya, r.accuracy * 100.0));
        writeln!(out, r##"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="#555"/>"##, x - 3.5, y - 3.5).unwrap();
        writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 7.0, y - 6.0, escape(&r.label)).unwrap();
    }
    writeln!(out, "</g>").unwrap();
    out.push_str("</svg>\n");
    out
}

//! Minimal static SVG plots: interval funnels with the true trajectory
//! overlaid, one panel per state component. Best effort — plotting failures
//! never affect exit codes.

use std::fmt::Write as _;

pub struct FunnelSeries<'a> {
    pub label: &'a str,
    pub times: &'a [f64],
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
    pub truth: Option<Vec<Vec<f64>>>,
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 42.0;

/// Render one funnel panel per component into a standalone SVG document.
pub fn render_funnels(series: &FunnelSeries<'_>) -> String {
    let comps = series.lo.len();
    let width = PANEL_W + 2.0 * MARGIN;
    let height = comps as f64 * (PANEL_H + MARGIN) + MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (t0, t1) = (
        series.times.first().copied().unwrap_or(0.0),
        series.times.last().copied().unwrap_or(1.0),
    );
    for c in 0..comps {
        let top = MARGIN + c as f64 * (PANEL_H + MARGIN);
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for k in 0..series.times.len() {
            y_min = y_min.min(series.lo[c][k]);
            y_max = y_max.max(series.hi[c][k]);
            if let Some(truth) = &series.truth {
                y_min = y_min.min(truth[c][k]);
                y_max = y_max.max(truth[c][k]);
            }
        }
        if !y_min.is_finite() || !y_max.is_finite() || y_min == y_max {
            y_min -= 1.0;
            y_max += 1.0;
        }
        let pad = 0.05 * (y_max - y_min);
        let (y_min, y_max) = (y_min - pad, y_max + pad);
        let x_of = |t: f64| MARGIN + (t - t0) / (t1 - t0).max(1e-12) * PANEL_W;
        let y_of = |v: f64| top + PANEL_H - (v - y_min) / (y_max - y_min) * PANEL_H;

        // Funnel polygon: lower bound forward, upper bound backward.
        let mut points = String::new();
        for (k, &t) in series.times.iter().enumerate() {
            let _ = write!(points, "{:.2},{:.2} ", x_of(t), y_of(series.lo[c][k]));
        }
        for (k, &t) in series.times.iter().enumerate().rev() {
            let _ = write!(points, "{:.2},{:.2} ", x_of(t), y_of(series.hi[c][k]));
        }
        let _ = writeln!(
            svg,
            r##"<polygon points="{points}" fill="#7fb3d5" fill-opacity="0.45" stroke="#2471a3" stroke-width="1"/>"##
        );
        if let Some(truth) = &series.truth {
            let mut path = String::new();
            for (k, &t) in series.times.iter().enumerate() {
                let cmd = if k == 0 { 'M' } else { 'L' };
                let _ = write!(path, "{cmd}{:.2} {:.2} ", x_of(t), y_of(truth[c][k]));
            }
            let _ = writeln!(
                svg,
                r##"<path d="{path}" fill="none" stroke="#c0392b" stroke-width="1.5" stroke-dasharray="5,3"/>"##
            );
        }
        // Axes and labels.
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#555" stroke-width="1"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12">{} [{}]  t ∈ [{:.2}, {:.2}]  y ∈ [{:.3}, {:.3}]</text>"#,
            MARGIN,
            top - 6.0,
            series.label,
            c + 1,
            t0,
            t1,
            y_min,
            y_max
        );
    }
    let _ = writeln!(svg, "</svg>");
    svg
}

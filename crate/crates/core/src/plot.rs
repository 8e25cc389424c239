// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG writer: heatmaps, scatter plots and line plots.

use std::fmt::Write;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Diverging blue-white-red color for `v` in `[-1, 1]`.
fn color(v: f64) -> String {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("rgb({},{},{})", r as u8, g as u8, b as u8)
}

/// Heatmap of `values[row][col]`, scaled by the largest absolute value.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<f64>]) -> String {
    let cell = 36.0;
    let (left, top) = (90.0, 50.0);
    let w = left + cell * col_labels.len() as f64 + 20.0;
    let h = top + cell * row_labels.len() as f64 + 40.0;
    let scale = values.iter().flatten().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut s = String::new();
    let _ = write!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, esc(title));
    for (j, c) in col_labels.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = write!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 6.0, esc(c));
    }
    for (i, r) in row_labels.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, y + cell * 0.6, esc(r));
        for (j, &v) in values[i].iter().enumerate() {
            let x = left + cell * j as f64;
            let _ = write!(s, r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="#ddd"/>"##, color(v / scale));
            let label = if v.is_finite() { format!("{v:.2}") } else { "-".into() };
            let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{label}</text>"#, x + cell / 2.0, y + cell * 0.6);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// A named point series.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Marker: `"dot"`, `"star"` or `"line"`.
    pub style: &'static str,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scatter or line plot with automatic axes.
pub fn xy_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (520.0, 360.0);
    let (l, r, t, b) = (60.0, 130.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = write!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<text x="{l}" y="22" font-size="14">{}</text>"#, esc(title));
    let _ = write!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, w - l - r, h - t - b);
    for (v, at) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = write!(s, r#"<text x="{at}" y="{}" text-anchor="middle">{v:.2}</text>"#, h - b + 14.0);
    }
    for (v, at) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, l - 4.0, at + 4.0);
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 12.0, esc(x_label));
    let _ = write!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, h / 2.0, h / 2.0, esc(y_label));
    for (k, ser) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let finite: Vec<(f64, f64)> = ser.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        match ser.style {
            "line" => {
                let path: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
                let _ = write!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            }
            "star" => {
                for &(x, y) in &finite {
                    let _ = write!(s, r#"<text x="{:.1}" y="{:.1}" fill="{c}" font-size="16" text-anchor="middle">*</text>"#, px(x), py(y) + 6.0);
                }
            }
            _ => {
                for &(x, y) in &finite {
                    let _ = write!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
                }
            }
        }
        let ly = t + 16.0 * k as f64 + 10.0;
        let _ = write!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}">{}</text>"#, w - r + 10.0, ly - 9.0, w - r + 24.0, ly, esc(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

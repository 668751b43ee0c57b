//! Output helpers: versioned JSON, PGM raster masks and static SVG plots.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Wraps a serializable payload with `schema_version` and `kind`.
pub fn versioned<T: Serialize>(kind: &str, payload: &T) -> Value {
    let body = serde_json::to_value(payload).unwrap_or(Value::Null);
    json!({ "schema_version": SCHEMA_VERSION, "kind": kind, "data": body })
}

pub fn to_json_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap_or_default();
    s.push('\n');
    s
}

/// Binary PGM of a row-major mask; row 0 is the bottom of the picture.
pub fn pgm(mask: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for r in (0..height).rev() {
        out.extend(mask[r * width..(r + 1) * width].iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static line plot. With `log_log`, non-positive values are dropped.
pub fn svg_lines(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_log: bool) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let tf = |v: f64| if log_log { v.log10() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_log || (*x > 0.0 && *y > 0.0)))
                .map(|&(x, y)| (tf(x), tf(y)))
                .collect()
        })
        .collect();
    let all: Vec<&(f64, f64)> = pts.iter().flatten().collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &all {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-300 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-300 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let lab = |v: f64| if log_log { format!("1e{v:.1}") } else { format!("{v:.3}") };
    let _ = writeln!(s, r#"<text x="{m}" y="{}" font-size="11">{}</text>"#, h - m + 16.0, lab(x0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, w - m, h - m + 16.0, lab(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, m - 4.0, h - m, lab(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, m - 4.0, m + 4.0, lab(y1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, h - 16.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        esc(ylabel)
    );
    for (k, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if !p.is_empty() {
            let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
            for &(x, y) in p {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - m - 150.0,
            m + 16.0 * k as f64,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of a row-major scalar field; row 0 at the bottom.
pub fn svg_heatmap(title: &str, values: &[f64], width: usize, height: usize) -> String {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (480.0 / width.max(height) as f64).max(1.0);
    let (w, h) = (cell * width as f64, cell * height as f64);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        w,
        h + 30.0,
        w,
        h + 30.0
    );
    let _ = writeln!(s, r#"<text x="4" y="18" font-size="14">{}</text>"#, esc(title));
    for r in 0..height {
        for c in 0..width {
            let v = values[r * width + c];
            let z = if v.is_finite() { (v - lo) / span } else { 0.0 };
            let (rr, bb) = ((255.0 * z) as u8, (255.0 * (1.0 - z)) as u8);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({rr},40,{bb})"/>"#,
                c as f64 * cell,
                30.0 + (height - 1 - r) as f64 * cell,
                cell,
                cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

//! Minimal SVG charts.
//!
//! Every plotted point also carries its raw values in `data-x` / `data-y`
//! attributes so a chart can be checked against the numbers it came from.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn header(s: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn ticks(s: &mut String, (xlo, xhi): (f64, f64), (ylo, yhi): (f64, f64)) {
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = MARGIN + f * (W - 2.0 * MARGIN);
        let y = H - MARGIN - f * (H - 2.0 * MARGIN);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{:.3}</text>"#, H - MARGIN + 16.0, xlo + f * (xhi - xlo));
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, ylo + f * (yhi - ylo));
    }
}

/// Overlaid line chart with a legend. An empty series list gives bare axes.
pub fn line_chart(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    header(&mut s, title, xlabel, ylabel);
    let xb = bounds(series.iter().flat_map(|c| c.points.iter().map(|p| p.0)));
    let yb = bounds(series.iter().flat_map(|c| c.points.iter().map(|p| p.1)));
    ticks(&mut s, xb, yb);
    let px = |x: f64| MARGIN + (x - xb.0) / (xb.1 - xb.0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - yb.0) / (yb.1 - yb.0) * (H - 2.0 * MARGIN);
    for (i, c) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{}">"#, escape(&c.label));
        let pts: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &c.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-x="{x}" data-y="{y}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="4" fill="{color}"/>"#, W - MARGIN - 150.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - MARGIN - 134.0, escape(&c.label));
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per measure, values in `[0, 1]`.
pub fn bar_chart(categories: &[String], measures: &[(String, Vec<f64>)], title: &str) -> String {
    let mut s = String::new();
    header(&mut s, title, "candidate", "normalized score");
    ticks(&mut s, (0.0, categories.len() as f64), (0.0, 1.0));
    let n = categories.len().max(1) as f64;
    let group = (W - 2.0 * MARGIN) / n;
    let bar = group * 0.8 / measures.len().max(1) as f64;
    for (m, (label, values)) in measures.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-label="{}">"#, escape(label));
        for (i, &v) in values.iter().enumerate() {
            let h = v.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);
            let x = MARGIN + group * i as f64 + group * 0.1 + bar * m as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{h:.2}" fill="{color}" data-x="{}" data-y="{v}"/>"#,
                H - MARGIN - h,
                escape(&categories[i])
            );
        }
        let ly = MARGIN + 16.0 * m as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="4" fill="{color}"/>"#, W - MARGIN - 150.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - MARGIN - 134.0, escape(label));
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Reads back `(label, [(x, y)])` from a [`line_chart`].
pub fn parse_line_chart(svg: &str) -> Vec<Series> {
    let attr = |line: &str, name: &str| -> Option<String> {
        let start = line.find(&format!("{name}=\""))? + name.len() + 2;
        let end = line[start..].find('"')? + start;
        Some(line[start..end].to_string())
    };
    let mut out: Vec<Series> = Vec::new();
    for line in svg.lines() {
        if line.starts_with("<g class=\"series\"") {
            out.push(Series {
                label: attr(line, "data-label").unwrap_or_default(),
                points: Vec::new(),
            });
        } else if line.starts_with("<circle") {
            if let (Some(c), Some(x), Some(y)) = (out.last_mut(), attr(line, "data-x"), attr(line, "data-y")) {
                if let (Ok(x), Ok(y)) = (x.parse(), y.parse()) {
                    c.points.push((x, y));
                }
            }
        }
    }
    out
}

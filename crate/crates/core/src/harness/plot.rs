//! Minimal static SVG line and bar charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series<'a> {
    pub name: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub dashed: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
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

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, xlabel: &str, ylabel: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (pl, pr, pt, pb) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = write!(
        out,
        r#"<path d="M{pl} {pt} L{pl} {pb} L{pr} {pb}" stroke="black" fill="none"/>"#
    );
    for (v, y) in [(y0, pb), (y1, pt)] {
        let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, pl - 4.0, y + 4.0);
    }
    for (v, x) in [(x0, pl), (x1, pr)] {
        let _ = write!(out, r#"<text x="{x}" y="{}" text-anchor="middle">{v:.2}</text>"#, pb + 14.0);
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (pl + pr) / 2.0,
        H - 8.0,
        escape(xlabel)
    );
    let _ = write!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (pt + pb) / 2.0,
        (pt + pb) / 2.0,
        escape(ylabel)
    );
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series<'_>]) -> String {
    let xr = range(series.iter().flat_map(|s| s.x.iter().copied()));
    let yr = range(series.iter().flat_map(|s| s.y.iter().copied()).chain([0.0]));
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - yr.0) / (yr.1 - yr.0) * (H - TOP - BOTTOM);
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, xlabel, ylabel, xr, yr);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .x
            .iter()
            .zip(s.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = write!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        );
        let ly = TOP + 12.0 + 14.0 * i as f64;
        let lx = W - RIGHT - 120.0;
        let _ = write!(
            out,
            r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}"{dash}/><text x="{}" y="{}">{}</text>"#,
            ly - 4.0,
            lx + 16.0,
            ly - 4.0,
            lx + 20.0,
            ly,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal bars in the given order.
pub fn bar_plot(title: &str, xlabel: &str, bars: &[(String, f64)]) -> String {
    let (lo, hi) = range(bars.iter().map(|b| b.1).chain([0.0]));
    let label_w = 110.0;
    let plot_l = LEFT + label_w;
    let plot_w = W - plot_l - RIGHT;
    let sx = |v: f64| plot_l + (v - lo) / (hi - lo) * plot_w;
    let n = bars.len().max(1) as f64;
    let bh = ((H - TOP - BOTTOM) / n).min(28.0);
    let mut out = String::new();
    header(&mut out, title);
    let zero = sx(0.0);
    let _ = write!(
        out,
        r#"<line x1="{zero}" y1="{TOP}" x2="{zero}" y2="{}" stroke="black"/>"#,
        H - BOTTOM
    );
    for (i, (name, v)) in bars.iter().enumerate() {
        let y = TOP + i as f64 * bh;
        let (x0, x1) = if *v >= 0.0 { (zero, sx(*v)) } else { (sx(*v), zero) };
        let color = if *v >= 0.0 { COLORS[0] } else { COLORS[1] };
        let _ = write!(
            out,
            r#"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            y + 2.0,
            (x1 - x0).max(0.5),
            bh - 4.0
        );
        let _ = write!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{} ({v:.4})</text>"#,
            plot_l - 4.0,
            y + bh / 2.0 + 4.0,
            escape(name)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        plot_l + plot_w / 2.0,
        H - 8.0,
        escape(xlabel)
    );
    out.push_str("</svg>\n");
    out
}

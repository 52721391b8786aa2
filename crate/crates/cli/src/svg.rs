//! Minimal 2-D scatter plot colored by class.

use std::fmt::Write;

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// `points` are (x, y, class). Non-finite points are skipped.
pub fn scatter(points: &[(f64, f64, usize)], title: &str) -> String {
    let finite: Vec<_> = points.iter().filter(|(x, y, _)| x.is_finite() && y.is_finite()).collect();
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y, _) in &finite {
        lo_x = lo_x.min(*x);
        hi_x = hi_x.max(*x);
        lo_y = lo_y.min(*y);
        hi_y = hi_y.max(*y);
    }
    if finite.is_empty() {
        (lo_x, hi_x, lo_y, hi_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    // equal aspect, non-degenerate span
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let (cx, cy) = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
    let scale = (SIZE - 2.0 * PAD) / span;
    let px = |x: f64| SIZE / 2.0 + (x - cx) * scale;
    let py = |y: f64| SIZE / 2.0 - (y - cy) * scale;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{w}" height="{w}" fill="none" stroke="#888888"/>"##,
        w = SIZE - 2.0 * PAD
    );
    for (x, y, c) in finite {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.6"/>"#,
            px(*x),
            py(*y),
            PALETTE[c % PALETTE.len()]
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

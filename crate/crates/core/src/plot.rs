//! Static SVG line and bar charts. Coordinates are printed with fixed
//! precision so the same data always gives the same file.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(s: &mut String, title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, y0 + 16.0, x.0);
    let _ = writeln!(s, r#"<text x="{x1:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, y0 + 16.0, x.1);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{y0:.1}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{y1:.1}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y.1);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            y - 9.0,
            WIDTH - MARGIN - 106.0,
            y,
            escape(label)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn scale(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// Polyline chart; `y_range` fixes the vertical axis when given.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: Option<(f64, f64)>) -> String {
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = y_range.unwrap_or_else(|| range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))));
    let mut s = String::new();
    frame(&mut s, title, x_label, y_label, xr, yr);
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (k, &(x, y)) in ser.points.iter().enumerate() {
            let px = scale(x, xr, MARGIN, WIDTH - MARGIN);
            let py = scale(y, yr, HEIGHT - MARGIN, MARGIN);
            let _ = write!(d, "{}{px:.2},{py:.2}", if k == 0 { "M" } else { " L" });
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#);
    }
    legend(&mut s, &series.iter().map(|s| s.label).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bars over shared bin edges; `groups[g].1[b]` is the height of bin `b`.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, edges: &[f64], groups: &[(&str, Vec<f64>)]) -> String {
    let xr = range(edges.iter().copied());
    let ymax = groups.iter().flat_map(|g| g.1.iter().copied()).fold(0.0_f64, f64::max);
    let yr = (0.0, if ymax > 0.0 { ymax } else { 1.0 });
    let mut s = String::new();
    frame(&mut s, title, x_label, y_label, xr, yr);
    let n = groups.len().max(1) as f64;
    for (g, (_, heights)) in groups.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        for (b, h) in heights.iter().enumerate() {
            if b + 1 >= edges.len() {
                break;
            }
            let left = scale(edges[b], xr, MARGIN, WIDTH - MARGIN);
            let right = scale(edges[b + 1], xr, MARGIN, WIDTH - MARGIN);
            let w = (right - left) / n;
            let top = scale(*h, yr, HEIGHT - MARGIN, MARGIN);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{top:.2}" width="{w:.2}" height="{:.2}" fill="{color}" fill-opacity="0.8"/>"#,
                left + w * g as f64,
                HEIGHT - MARGIN - top
            );
        }
    }
    legend(&mut s, &groups.iter().map(|g| g.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

//! Minimal SVG plots for quick inspection. The CSV files next to them are
//! the real output.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
}

fn header(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_labels(s: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{}">{x0:.3}</text>"#, H - MARGIN + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, W - MARGIN, H - MARGIN + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, MARGIN - 4.0, H - MARGIN);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, MARGIN - 4.0, MARGIN + 8.0);
}

/// One polyline per series over a shared x axis.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let xr = range(x.iter().copied());
    let yr = range(series.iter().flat_map(|s| s.1.iter().copied()));
    let px = |v: f64| MARGIN + (v - xr.0) / (xr.1 - xr.0) * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v - yr.0) / (yr.1 - yr.0) * (H - 2.0 * MARGIN);
    let mut s = header(title, xlabel, ylabel);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    axis_labels(&mut s, xr, yr);
    for (k, (name, ys)) in series.iter().enumerate() {
        let hue = (k * 360 / series.len().max(1)) % 360;
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="hsl({hue},70%,40%)" stroke-width="1.2" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `z[row][col]`; rows run bottom to top.
pub fn heatmap(title: &str, xlabel: &str, ylabel: &str, x: &[f64], y: &[f64], z: &[Vec<f64>]) -> String {
    let zr = range(z.iter().flatten().copied());
    let mut s = header(title, xlabel, ylabel);
    let (nr, nc) = (z.len().max(1), z.first().map_or(1, |r| r.len().max(1)));
    let cw = (W - 2.0 * MARGIN) / nc as f64;
    let ch = (H - 2.0 * MARGIN) / nr as f64;
    for (i, row) in z.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = if v.is_finite() { (v - zr.0) / (zr.1 - zr.0) } else { 0.0 };
            let (r, b) = ((255.0 * t) as u8, (255.0 * (1.0 - t)) as u8);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},40,{b})"/>"#,
                MARGIN + j as f64 * cw,
                H - MARGIN - (i + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    axis_labels(&mut s, range(x.iter().copied()), range(y.iter().copied()));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">z {:.3} to {:.3}</text>"#, W - MARGIN, MARGIN - 6.0, zr.0, zr.1);
    s.push_str("</svg>\n");
    s
}

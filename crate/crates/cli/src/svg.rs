//! Minimal SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named series of y values at x = 0, 1, 2, ...
pub struct Series<'a> {
    pub name: &'a str,
    pub y: &'a [f64],
    pub dashed: bool,
}

/// Renders the series on shared axes with a legend.
pub fn line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let finite = series.iter().flat_map(|s| s.y.iter()).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let n = series.iter().map(|s| s.y.len()).max().unwrap_or(1).max(2);
    let px = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
    let py = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#, MARGIN - 4.0, y + 4.0, v);
        let _ = writeln!(out, r##"<path d="M{} {y:.1} H{}" stroke="#ddd"/>"##, MARGIN, WIDTH - MARGIN);
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">frame</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, &v) in s.y.iter().enumerate() {
            if !v.is_finite() {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.1} {:.1} ", if pen_down { "L" } else { "M" }, px(i), py(v));
            pen_down = true;
        }
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, d.trim_end());
        let ly = MARGIN + 16.0 * k as f64;
        let lx = WIDTH - MARGIN - 150.0;
        let _ = writeln!(out, r#"<path d="M{lx} {ly} h20" stroke="{color}" stroke-width="2"{dash}/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(s.name));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_path_per_series() {
        let a = [0.0, 1.0, 2.0];
        let b = [2.0, f64::NAN, 0.0];
        let svg = line_chart(
            "t <1>",
            "dB",
            &[
                Series { name: "a", y: &a, dashed: false },
                Series { name: "b", y: &b, dashed: true },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("t &lt;1&gt;"));
        assert_eq!(svg.matches("stroke-width=\"2\"").count(), 4);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}

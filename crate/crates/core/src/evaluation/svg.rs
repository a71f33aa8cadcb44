//! Minimal SVG rendering for probability plots, curves and heatmaps.

use std::fmt::Write;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Scatter or line plot. With `reference` the line `y = x` is drawn.
pub fn xy_plot(points: &[(f64, f64)], title: &str, x_label: &str, y_label: &str, connect: bool, reference: bool) -> String {
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    for (v, anchor_x, anchor_y) in [(x0, sx(x0), HEIGHT - MARGIN + 15.0), (x1, sx(x1), HEIGHT - MARGIN + 15.0)] {
        let _ = writeln!(out, r#"<text x="{anchor_x}" y="{anchor_y}" text-anchor="middle">{v:.3}</text>"#);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    if reference {
        let lo = x0.max(y0);
        let hi = x1.min(y1);
        if lo < hi {
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="grey" stroke-dasharray="4 3"/>"#,
                sx(lo),
                sy(lo),
                sx(hi),
                sy(hi)
            );
        }
    }
    let finite: Vec<_> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    if connect {
        let path: Vec<String> = finite.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, path.join(" "));
    } else {
        for p in finite {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue"/>"#, sx(p.0), sy(p.1));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Row-major heatmap on a white-to-red scale; missing cells are hatched grey.
pub fn heatmap(rows: usize, cols: usize, values: &[Option<f64>], title: &str) -> String {
    let (lo, hi) = range(values.iter().flatten().copied());
    let cw = (WIDTH - 2.0 * MARGIN) / cols.max(1) as f64;
    let ch = (HEIGHT - 2.0 * MARGIN) / rows.max(1) as f64;
    let mut out = String::new();
    header(&mut out, title);
    for r in 0..rows {
        for c in 0..cols {
            let fill = match values.get(r * cols + c).copied().flatten() {
                Some(v) => {
                    let s = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                    let g = (255.0 * (1.0 - s)).round() as u8;
                    format!("rgb(255,{g},{g})")
                }
                None => "#cccccc".to_string(),
            };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cw:.2}" height="{ch:.2}" fill="{fill}" stroke="white"/>"#,
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">range {lo:.4} to {hi:.4}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_documents() {
        let plot = xy_plot(&[(0.0, 0.1), (1.0, 0.9), (f64::NAN, 1.0)], "a < b", "x", "y", false, true);
        assert!(plot.starts_with("<svg") && plot.trim_end().ends_with("</svg>"));
        assert_eq!(plot.matches("<circle").count(), 2);
        assert!(plot.contains("a &lt; b"));
        let map = heatmap(2, 3, &[Some(0.1), None, Some(0.3), Some(0.0), Some(0.2), Some(0.1)], "m");
        assert_eq!(map.matches("<rect").count(), 1 + 6);
        assert!(map.contains("#cccccc"));
    }
}

//! Data-only learning-curve charts as standalone SVG.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One polyline per series, each rescaled to its own `[min, max]` so curves
/// with different units share the frame. Non-finite points are skipped.
pub fn line_chart(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).filter(|v| v.is_finite());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x0, x1) = if x0.is_finite() && x1 > x0 { (x0, x1) } else { (0.0, 1.0) };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="gray"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    for (k, (name, pts)) in series.iter().enumerate() {
        let finite: Vec<(f64, f64)> = pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = finite
            .iter()
            .map(|(x, y)| {
                let px = PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
                let py = H - PAD - (y - lo) / span * (H - 2.0 * PAD);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = PAD + 16.0 * (k as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{} [{}, {}]</text>"#,
            W - PAD - 200.0,
            escape(name),
            short(lo),
            short(hi)
        );
    }
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">epoch {} to {}</text>"#, H - 16.0, short(x0), short(x1));
    s.push_str("</svg>\n");
    s
}

fn short(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "n/a".into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_polyline_per_series() {
        let svg = line_chart("a < b", &[("loss", vec![(1.0, 3.0), (2.0, 1.0)]), ("psnr", vec![(0.0, f64::NAN), (1.0, 20.0), (2.0, 22.0)])]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.ends_with("</svg>\n"));
    }
}

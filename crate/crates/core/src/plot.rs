//! Static SVG line charts of individual windows.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::SeriesWindow;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per channel over a shared y-range.
pub fn line_chart_svg(w: &SeriesWindow, title: &str) -> String {
    let finite = w.values.iter().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |t: usize| MARGIN + plot_w * t as f64 / (w.m.max(2) - 1) as f64;
    let y_of = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444" stroke-width="1"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        MARGIN / 2.0 + 5.0,
        escape(title)
    );
    for (label, v) in [(format!("{hi:.3}"), hi), (format!("{lo:.3}"), lo)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{label}</text>"#,
            MARGIN - 4.0,
            y_of(v) + 3.0
        );
    }
    for c in 0..w.d {
        let mut pts = String::new();
        for (t, &v) in w.channel(c).iter().enumerate() {
            if v.is_finite() {
                let _ = write!(pts, "{:.2},{:.2} ", x_of(t), y_of(v));
            }
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            PALETTE[c % PALETTE.len()],
            pts.trim_end()
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_line_chart(path: impl AsRef<Path>, w: &SeriesWindow, title: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, line_chart_svg(w, title)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed() {
        let w = SeriesWindow::new(2, 50, (0..100).map(|i| (i as f64 * 0.2).sin()).collect()).unwrap();
        let svg = line_chart_svg(&w, "real <sample> & co");
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        let lines: Vec<_> = root.children().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].attribute("points").unwrap().split(' ').count(), 50);
    }

    #[test]
    fn constant_and_non_finite_windows_still_render() {
        let flat = SeriesWindow::constant(1, 10, 3.0);
        roxmltree::Document::parse(&line_chart_svg(&flat, "flat")).unwrap();
        let mut odd = SeriesWindow::constant(1, 3, 0.0);
        odd.values[1] = f64::NAN;
        roxmltree::Document::parse(&line_chart_svg(&odd, "nan")).unwrap();
    }
}

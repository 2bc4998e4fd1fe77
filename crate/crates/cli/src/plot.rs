//! Training-curve SVG line charts.

use std::fmt::Write as _;

use vinlab_core::{Error, Result};

pub const WIDTH: f64 = 720.0;
pub const HEIGHT: f64 = 420.0;
/// Plot area in SVG user units: left, top, right, bottom.
pub const AREA: (f64, f64, f64, f64) = (70.0, 20.0, 560.0, 380.0);

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per series over linear axes spanning the union of all points.
pub fn render_svg(series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    if let Some(s) = series.iter().find(|s| s.points.is_empty()) {
        return Err(Error::Config(format!("series `{}` has no points", s.label)));
    }
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let (xmin, xmax) = span(all().map(|p| p.0));
    let (ymin, ymax) = span(all().map(|p| p.1));
    let (left, top, right, bottom) = AREA;
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * (right - left);
    let sy = |y: f64| bottom - (y - ymin) / (ymax - ymin) * (bottom - top);

    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<path d="M{left} {top}V{bottom}H{right}" fill="none" stroke="black" stroke-width="1"/>"#
    )
    .unwrap();
    let text = |out: &mut String, x: f64, y: f64, anchor: &str, body: &str| {
        writeln!(
            out,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{}</text>"#,
            escape(body)
        )
        .unwrap();
    };
    text(&mut out, left, bottom + 18.0, "middle", &format!("{xmin}"));
    text(&mut out, right, bottom + 18.0, "middle", &format!("{xmax}"));
    text(&mut out, left - 6.0, bottom + 4.0, "end", &format!("{ymin:.2}"));
    text(&mut out, left - 6.0, top + 4.0, "end", &format!("{ymax:.2}"));
    text(&mut out, (left + right) / 2.0, HEIGHT - 8.0, "middle", "step");
    text(&mut out, 14.0, (top + bottom) / 2.0, "middle", "reward");

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = top + 10.0 + 18.0 * i as f64;
        writeln!(
            out,
            r#"<line x1="{}" y1="{ly:.2}" x2="{}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            right + 12.0,
            right + 32.0
        )
        .unwrap();
        text(&mut out, right + 38.0, ly + 4.0, "start", &s.label);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Parses the `points` attribute of every polyline in an SVG produced by
/// [`render_svg`].
pub fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .filter_map(|l| l.split("points=\"").nth(1)?.split('"').next())
        .map(|pts| {
            pts.split_whitespace()
                .filter_map(|p| {
                    let (x, y) = p.split_once(',')?;
                    Some((x.parse().ok()?, y.parse().ok()?))
                })
                .collect()
        })
        .collect()
}

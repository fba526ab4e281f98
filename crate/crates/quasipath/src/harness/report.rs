//! Deterministic CSV and SVG emission.
//!
//! Same inputs give byte-identical files: floats use one fixed format, no
//! timestamps or machine identifiers appear anywhere, and every iteration
//! runs over ordered containers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;

/// Fixed float format for all emitted data.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.12e}")
    }
}

/// Write a CSV with a header row; parent directories are created.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// Write plain text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

const PALETTE: &[&str] = &["#1f6fb2", "#d1495b", "#4f8a5b", "#8264a8", "#b2813a", "#3a8f96"];

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 160.0;
const MT: f64 = 24.0;
const MB: f64 = 52.0;

fn axis_frame(svg: &mut String, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (ML, W - MR, H - MB, MT);
    let _ = write!(
        svg,
        r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black" stroke-width="1"/>
<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black" stroke-width="1"/>
<text x="{tx}" y="{ty}" font-size="13" text-anchor="middle" font-family="sans-serif">{xlabel}</text>
<text x="16" y="{my}" font-size="13" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {my})">{ylabel}</text>
"#,
        tx = (x0 + x1) / 2.0,
        ty = H - 12.0,
        my = (y0 + y1) / 2.0,
    );
}

/// One named series of `(x, y)` points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Log-log line plot. Points with nonpositive or nonfinite coordinates are
/// dropped; each series gets a legend entry.
pub fn svg_loglog(series: &[Series], xlabel: &str, ylabel: &str) -> String {
    let mut pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
                .map(|(x, y)| (x.ln(), y.ln()))
                .collect()
        })
        .collect();
    for p in &mut pts {
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let all: Vec<(f64, f64)> = pts.iter().flatten().copied().collect();
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    axis_frame(&mut svg, xlabel, ylabel);
    if !all.is_empty() {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in &all {
            xmin = xmin.min(*x);
            xmax = xmax.max(*x);
            ymin = ymin.min(*y);
            ymax = ymax.max(*y);
        }
        let pad = |lo: &mut f64, hi: &mut f64| {
            let span = (*hi - *lo).max(1e-9);
            *lo -= 0.06 * span;
            *hi += 0.06 * span;
        };
        pad(&mut xmin, &mut xmax);
        pad(&mut ymin, &mut ymax);
        let px = |x: f64| ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
        let py = |y: f64| (H - MB) - (y - ymin) / (ymax - ymin) * (H - MB - MT);

        // Ticks at the data abscissas and at integer log levels in y.
        let mut seen = Vec::new();
        for (x, _) in &all {
            if !seen.iter().any(|s: &f64| (s - x).abs() < 1e-12) {
                seen.push(*x);
                let _ = write!(
                    svg,
                    r#"<line x1="{x0:.2}" y1="{y0}" x2="{x0:.2}" y2="{y2}" stroke="black"/><text x="{x0:.2}" y="{yt}" font-size="11" text-anchor="middle" font-family="sans-serif">{v:.3}</text>"#,
                    x0 = px(*x),
                    y0 = H - MB,
                    y2 = H - MB + 5.0,
                    yt = H - MB + 18.0,
                    v = x.exp(),
                );
            }
        }
        let lo = ymin.ceil() as i64;
        let hi = ymax.floor() as i64;
        for k in lo..=hi {
            let _ = write!(
                svg,
                r#"<line x1="{x2}" y1="{y0:.2}" x2="{x0}" y2="{y0:.2}" stroke="black"/><text x="{xt}" y="{yt:.2}" font-size="11" text-anchor="end" font-family="sans-serif">{v:.2e}</text>"#,
                x0 = ML,
                x2 = ML - 5.0,
                y0 = py(k as f64),
                xt = ML - 8.0,
                yt = py(k as f64) + 4.0,
                v = (k as f64).exp(),
            );
        }

        for (si, p) in pts.iter().enumerate() {
            if p.is_empty() {
                continue;
            }
            let color = PALETTE[si % PALETTE.len()];
            let path: Vec<String> = p
                .iter()
                .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
                .collect();
            let _ = write!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
            for (x, y) in p {
                let _ = write!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(*x),
                    py(*y)
                );
            }
            let ly = MT + 16.0 * si as f64 + 10.0;
            let _ = write!(
                svg,
                r#"<line x1="{lx}" y1="{ly}" x2="{lx2}" y2="{ly}" stroke="{color}" stroke-width="1.5"/><text x="{lt}" y="{ty}" font-size="11" font-family="sans-serif">{label}</text>"#,
                lx = W - MR + 10.0,
                lx2 = W - MR + 30.0,
                lt = W - MR + 36.0,
                ty = ly + 4.0,
                label = series[si].label,
            );
        }
    }
    svg.push_str("</svg>");
    svg
}

/// Grouped bar chart over `[0, span)`: one translucent layer per series,
/// `counts[series][bin]`.
pub fn svg_histogram(
    labels: &[String],
    counts: &[Vec<usize>],
    span: f64,
    xlabel: &str,
    marks: &[(f64, String)],
) -> String {
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    axis_frame(&mut svg, xlabel, "exit count");
    let peak = counts
        .iter()
        .flat_map(|c| c.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let bins = counts.first().map_or(0, Vec::len);
    if bins > 0 {
        let bw = (W - ML - MR) / bins as f64;
        let py = |c: f64| (H - MB) - c / peak * (H - MB - MT);
        for (si, layer) in counts.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            for (bi, &c) in layer.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let _ = write!(
                    svg,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{bw:.2}" height="{h:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                    x = ML + bi as f64 * bw,
                    y = py(c as f64),
                    h = (H - MB) - py(c as f64),
                );
            }
            let ly = MT + 16.0 * si as f64 + 10.0;
            let _ = write!(
                svg,
                r#"<rect x="{lx}" y="{ry}" width="14" height="10" fill="{color}" fill-opacity="0.45"/><text x="{lt}" y="{ty}" font-size="11" font-family="sans-serif">{label}</text>"#,
                lx = W - MR + 10.0,
                ry = ly - 8.0,
                lt = W - MR + 30.0,
                ty = ly + 1.0,
                label = labels.get(si).cloned().unwrap_or_default(),
            );
        }
        // Phase ticks at quarters of the span plus caller-supplied marks.
        for q in 0..=4 {
            let v = span * q as f64 / 4.0;
            let x = ML + (W - ML - MR) * q as f64 / 4.0;
            let _ = write!(
                svg,
                r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{y2}" stroke="black"/><text x="{x:.2}" y="{yt}" font-size="11" text-anchor="middle" font-family="sans-serif">{v:.2}</text>"#,
                y0 = H - MB,
                y2 = H - MB + 5.0,
                yt = H - MB + 18.0,
            );
        }
        for (v, label) in marks {
            let x = ML + v / span * (W - ML - MR);
            let _ = write!(
                svg,
                r##"<line x1="{x:.2}" y1="{MT}" x2="{x:.2}" y2="{y0}" stroke="#444" stroke-dasharray="4 3"/><text x="{x:.2}" y="{ty}" font-size="11" text-anchor="middle" font-family="sans-serif">{label}</text>"##,
                y0 = H - MB,
                ty = MT - 6.0,
            );
        }
    }
    svg.push_str("</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_gets_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("t.csv");
        write_csv(&path, "a,b", &["1,2".into(), "3,4".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,2\n3,4\n");
    }

    #[test]
    fn float_format_is_stable() {
        assert_eq!(fmt_f64(0.1), "1.000000000000e-1");
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    #[test]
    fn plots_are_valid_svg_with_all_series() {
        let svg = svg_loglog(
            &[Series {
                label: "gap".into(),
                points: vec![(0.4, 0.1), (0.2, 0.012), (0.1, 1.6e-3)],
            }],
            "delta",
            "gap",
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("gap"));

        let hist = svg_histogram(
            &["eps 0.15".into()],
            &[vec![0, 3, 9, 1]],
            6.28,
            "exit phase",
            &[(1.57, "end".into())],
        );
        assert!(hist.contains("rect") && hist.ends_with("</svg>"));
    }
}

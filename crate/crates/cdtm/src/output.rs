//! Result serialization: versioned CSV tables, row-major matrix text
//! and small self-contained SVG line plots. All numbers are written
//! with Rust's shortest-round-trip float formatting, so identical runs
//! produce bitwise-identical files.

use std::fmt::Write as _;

use nalgebra::{Dim, Matrix, RawStorage};

/// Shortest decimal representation that round-trips the exact f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// CSV table with a `# schema vN` comment followed by the header row.
#[derive(Debug, Clone)]
pub struct CsvTable {
    schema: String,
    version: u32,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(schema: &str, version: u32, columns: &[&str]) -> Self {
        Self {
            schema: schema.to_string(),
            version,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<String>) {
        assert_eq!(
            cells.len(),
            self.columns.len(),
            "row width must match the header"
        );
        self.rows.push(cells);
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} v{}", self.schema, self.version);
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.format())
    }
}

/// Row-major decimal text: one matrix row per line, space-separated.
pub fn format_matrix<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(
    m: &Matrix<f64, R, C, S>,
) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// One named curve of a line plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal SVG line plot: axes, tick labels, one polyline per series
/// and a small legend. Finite points only; plots with no finite data
/// render an empty frame.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 55.0;
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (x0, x1, y0, y1) = if finite.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for (x, y) in &finite {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
        if x1 - x0 < 1e-300 {
            x1 = x0 + 1.0;
        }
        let pad = 0.05 * (y1 - y0).max(1e-300);
        (x0, x1, (y0 - pad).min(y0), y1 + pad)
    };
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    // frame
    let _ = writeln!(
        svg,
        r#"<rect x="{ML}" y="{MT}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - ML - MR,
        H - MT - MB
    );
    // ticks
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            sx(xv),
            H - MB + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            ML - 6.0,
            sy(yv) + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        W / 2.0,
        H - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{},{}", sx(*x), sy(*y)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (px, py) = p.split_once(',').expect("point format");
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="2.5" fill="{color}"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            ML + 8.0,
            MT + 16.0 + 14.0 * i as f64,
            xml_escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</svg>");
    svg
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    #[test]
    fn csv_has_versioned_schema_comment_and_header() {
        let mut t = CsvTable::new("trial-results", 1, &["trial", "err"]);
        t.push_row(vec!["0".into(), fmt_f64(0.125)]);
        let text = t.format();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# trial-results v1"));
        assert_eq!(lines.next(), Some("trial,err"));
        assert_eq!(lines.next(), Some("0,0.125"));
    }

    #[test]
    #[should_panic(expected = "row width")]
    fn csv_rejects_ragged_rows() {
        let mut t = CsvTable::new("x", 1, &["a", "b"]);
        t.push_row(vec!["1".into()]);
    }

    #[test]
    fn matrix_text_is_row_major_and_round_trips() {
        let m = Matrix2::new(1.0, 0.1, -2.5e-17, 4.0);
        let text = format_matrix(&m);
        let parsed: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(parsed, vec![1.0, 0.1, -2.5e-17, 4.0]);
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn float_formatting_round_trips_exactly() {
        for &x in &[0.1, 1.0 / 3.0, 2.4e-3, -5.0e21, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn svg_plot_contains_series_and_labels() {
        let svg = svg_line_plot(
            "std vs n",
            "features",
            "std [m]",
            &[Series {
                label: "position".into(),
                points: vec![(10.0, 3.0), (50.0, 1.5), (150.0, 1.1)],
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("std vs n"));
        assert!(svg.contains("position"));
        // deterministic output
        let svg2 = svg_line_plot(
            "std vs n",
            "features",
            "std [m]",
            &[Series {
                label: "position".into(),
                points: vec![(10.0, 3.0), (50.0, 1.5), (150.0, 1.1)],
            }],
        );
        assert_eq!(svg, svg2);
    }
}

//! CSV metrics and SVG line charts.
//!
//! The CSV file is the record of a run; charts are rendered from CSV
//! columns so they can be regenerated after the fact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::RoundMetrics;

pub const CSV_HEADER: &str =
    "round,train_loss,test_accuracy,test_loss,global_update_norm,d_t,mean_pairwise_cosine,effective_eta_l";

/// Rounds to 9 significant digits and prints the shortest string that
/// reads back as that rounded value. Non-finite values print as empty.
pub fn format_real(x: f64) -> String {
    if !x.is_finite() {
        return String::new();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("scientific literal parses");
    format!("{rounded}")
}

fn opt(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.round,
            format_real(m.train_loss),
            opt(m.test_accuracy),
            opt(m.test_loss),
            format_real(m.global_update_norm),
            opt(m.d_t),
            opt(m.mean_pairwise_cosine),
            format_real(m.effective_eta_l),
        );
    }
    out
}

pub fn write_csv(metrics: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, metrics_csv(metrics))?;
    Ok(())
}

/// Parsed CSV: header names and rows with empty fields as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CsvTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Config("empty CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    let f = f.trim();
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>().map(Some).map_err(|_| {
                            Error::Config(format!("CSV line {}: bad number `{f}`", n + 2))
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != header.len() {
                return Err(Error::Config(format!(
                    "CSV line {} has {} fields, header has {}",
                    n + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("CSV has no column `{name}`")))
    }

    /// `(x, y)` points for `y_col` against `x_col`, skipping empty cells.
    pub fn series(&self, x_col: &str, y_col: &str) -> Result<Series> {
        let (xi, yi) = (self.column_index(x_col)?, self.column_index(y_col)?);
        let points = self
            .rows
            .iter()
            .filter_map(|r| Some((r[xi]?, r[yi]?)))
            .collect();
        Ok(Series {
            name: y_col.to_string(),
            points,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_Y: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Standalone SVG line chart with one polyline per series.
pub fn svg_chart(series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Config("chart needs at least one series".into()));
    }
    for s in series {
        if s.points.len() < 2 {
            return Err(Error::Config(format!(
                "series `{}` needs at least 2 points",
                s.name
            )));
        }
        if s.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Config(format!("series `{}` has non-finite points", s.name)));
        }
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in all {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max <= x_min {
        return Err(Error::Config("degenerate chart: constant x".into()));
    }
    if y_max <= y_min {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let px = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| HEIGHT - MARGIN_Y - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 500" width="800" height="500">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="800" height="500" fill="white"/>"#);
    let (left, right) = (MARGIN_LEFT, MARGIN_LEFT + plot_w);
    let (top, bottom) = (MARGIN_Y, HEIGHT - MARGIN_Y);
    let _ = writeln!(
        svg,
        r#"<g stroke="black" stroke-width="1"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#,
        l = coord(left),
        r = coord(right),
        t = coord(top),
        b = coord(bottom)
    );
    let label = |v: f64| format!("{:.4}", v);
    let _ = writeln!(
        svg,
        r#"<g font-family="sans-serif" font-size="12" fill="black"><text x="{l}" y="{bl}" text-anchor="middle">{xmin}</text><text x="{r}" y="{bl}" text-anchor="middle">{xmax}</text><text x="{yl}" y="{b}" text-anchor="end">{ymin}</text><text x="{yl}" y="{t}" text-anchor="end">{ymax}</text></g>"#,
        l = coord(left),
        r = coord(right),
        bl = coord(bottom + 20.0),
        yl = coord(left - 6.0),
        b = coord(bottom),
        t = coord(top + 4.0),
        xmin = label(x_min),
        xmax = label(x_max),
        ymin = label(y_min),
        ymax = label(y_max),
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", coord(px(x)), coord(py(y))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{x1}" y1="{y}" x2="{x2}" y2="{y}" stroke="{color}" stroke-width="3"/><text x="{tx}" y="{ty}" font-family="sans-serif" font-size="12">{name}</text></g>"#,
            x1 = coord(right + 15.0),
            x2 = coord(right + 40.0),
            y = coord(ly),
            tx = coord(right + 46.0),
            ty = coord(ly + 4.0),
            name = escape(&s.name),
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render_svg(series: &[Series], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, svg_chart(series)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(round: usize, d_t: Option<f64>) -> RoundMetrics {
        RoundMetrics {
            round,
            train_loss: 0.5,
            test_accuracy: Some(0.1),
            test_loss: Some(std::f64::consts::LN_10),
            global_update_norm: 1.0 / 3.0,
            vanilla_update_norm: 0.2,
            d_t,
            mean_pairwise_cosine: None,
            effective_eta_l: 0.1 * 0.998f64.powi(round as i32),
            participants: 5,
            mean_local_steps: 3.0,
        }
    }

    #[test]
    fn real_formatting() {
        assert_eq!(format_real(0.1), "0.1");
        assert_eq!(format_real(1.0 / 3.0), "0.333333333");
        assert_eq!(format_real(std::f64::consts::LN_10), "2.30258509");
        assert_eq!(format_real(1e-20), "0.00000000000000000001");
        assert_eq!(format_real(f64::NAN), "");
        assert_eq!(format_real(f64::INFINITY), "");
    }

    #[test]
    fn empty_metrics_header_only() {
        assert_eq!(metrics_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn undefined_values_are_empty_fields() {
        let csv = metrics_csv(&[metric(0, None)]);
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[5], "");
        assert_eq!(fields[6], "");
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn csv_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = vec![metric(0, Some(1.5)), metric(1, None)];
        write_csv(&m, dir.path().join("a.csv")).unwrap();
        write_csv(&m, dir.path().join("b.csv")).unwrap();
        assert_eq!(
            fs::read(dir.path().join("a.csv")).unwrap(),
            fs::read(dir.path().join("b.csv")).unwrap()
        );
        let table = CsvTable::read(dir.path().join("a.csv")).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.series("round", "d_t").unwrap().points, vec![(0.0, 1.5)]);
    }

    fn series(name: &str, pts: &[(f64, f64)]) -> Series {
        Series {
            name: name.into(),
            points: pts.to_vec(),
        }
    }

    #[test]
    fn svg_single_and_double_series() {
        let one = svg_chart(&[series("a", &[(0.0, 0.0), (1.0, 1.0)])]).unwrap();
        assert_eq!(one.matches("<polyline").count(), 1);
        assert!(one.contains(r#"viewBox="0 0 800 500""#));
        let two = svg_chart(&[
            series("acc", &[(0.0, 0.0), (1.0, 1.0)]),
            series("loss<x>", &[(0.0, 2.0), (1.0, 0.5)]),
        ])
        .unwrap();
        assert_eq!(two.matches("<polyline").count(), 2);
        assert_eq!(two.matches(r#"class="legend""#).count(), 2);
        assert!(two.contains("loss&lt;x&gt;"));
        assert_eq!(
            two,
            svg_chart(&[
                series("acc", &[(0.0, 0.0), (1.0, 1.0)]),
                series("loss<x>", &[(0.0, 2.0), (1.0, 0.5)]),
            ])
            .unwrap()
        );
    }

    #[test]
    fn svg_rejects_degenerate_input() {
        assert!(svg_chart(&[]).is_err());
        assert!(svg_chart(&[series("a", &[(0.0, 1.0)])]).is_err());
        assert!(svg_chart(&[series("a", &[(1.0, 0.0), (1.0, 2.0)])]).is_err());
    }
}

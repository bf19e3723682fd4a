//! Deterministic SVG line charts of the CSV artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 45.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// `energy.csv`: energy against step.
    Energy,
    /// `ratio.csv`: HC/DC ratio against t, log scale.
    Ratio,
    /// `train.csv`: train and test accuracy against epoch.
    Accuracy,
}

impl PlotKind {
    pub fn csv_name(self) -> &'static str {
        match self {
            PlotKind::Energy => "energy.csv",
            PlotKind::Ratio => "ratio.csv",
            PlotKind::Accuracy => "train.csv",
        }
    }

    pub fn svg_name(self) -> &'static str {
        match self {
            PlotKind::Energy => "energy.svg",
            PlotKind::Ratio => "ratio.svg",
            PlotKind::Accuracy => "accuracy.svg",
        }
    }

    fn columns(self) -> (&'static str, &'static [&'static str]) {
        match self {
            PlotKind::Energy => ("step", &["energy"]),
            PlotKind::Ratio => ("t", &["ratio"]),
            PlotKind::Accuracy => ("epoch", &["train_acc", "test_acc"]),
        }
    }

    fn title(self) -> &'static str {
        match self {
            PlotKind::Energy => "energy vs step",
            PlotKind::Ratio => "HC/DC ratio vs t (log10)",
            PlotKind::Accuracy => "accuracy vs epoch",
        }
    }

    fn log_y(self) -> bool {
        matches!(self, PlotKind::Ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads `x_col` and each of `y_cols` from CSV text with a header row.
pub fn read_series(file: &str, text: &str, x_col: &str, y_cols: &[&str]) -> Result<Vec<Series>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let err = |line: u64, message: String| CliError::Csv { file: file.to_string(), line, message };
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing column `{name}`")))
    };
    let x_idx = index(x_col)?;
    let y_idx = y_cols.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
    let mut series: Vec<Series> = y_cols.iter().map(|c| Series { name: c.to_string(), points: Vec::new() }).collect();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64> {
            let field = record.get(i).ok_or_else(|| err(line, format!("missing field {i}")))?;
            field
                .trim()
                .parse::<f64>()
                .map_err(|_| err(line, format!("not a number: `{field}`")))
        };
        let x = parse(x_idx)?;
        for (s, &i) in series.iter_mut().zip(&y_idx) {
            s.points.push((x, parse(i)?));
        }
    }
    Ok(series)
}

fn bounds(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// Renders line charts. Non-finite points (and non-positive ones on a log
/// axis) are dropped. No series or no points gives the axes alone.
pub fn render_svg(title: &str, x_label: &str, series: &[Series], log_y: bool) -> String {
    let transformed: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, if log_y { y.log10() } else { y }))
                .collect()
        })
        .collect();
    let xs = bounds(transformed.iter().flatten().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let ys = bounds(transformed.iter().flatten().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - xs.0) / (xs.1 - xs.0) * plot_w;
    let sy = |y: f64| TOP + (ys.1 - y) / (ys.1 - ys.0) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"#, WIDTH / 2.0, title);
    let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
    let _ = writeln!(out, r#"<path class="axes" d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" stroke="black" fill="none"/>"#);
    for (x, anchor, v) in [(x0, "start", xs.0), (x1, "end", xs.1)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{}" font-size="11" text-anchor="{anchor}">{}</text>"#, y0 + 15.0, fmt_tick(v));
    }
    for (y, v) in [(y0, ys.0), (y1, ys.1)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, x0 - 5.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{x_label}</text>"#, LEFT + plot_w / 2.0, HEIGHT - 8.0);
    for (i, (s, pts)) in series.iter().zip(&transformed).enumerate() {
        if pts.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.3} {:.3}", if j == 0 { "M " } else { " L " }, sx(x), sy(y));
        }
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(out, r#"<path class="series" data-name="{}" d="{d}" stroke="{color}" fill="none"/>"#, s.name);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            LEFT + 10.0,
            TOP + 15.0 + 14.0 * i as f64,
            s.name
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Chart for one artifact kind from its CSV text.
pub fn render_csv(kind: PlotKind, text: &str) -> Result<String> {
    let (x, ys) = kind.columns();
    let series = read_series(kind.csv_name(), text, x, ys)?;
    Ok(render_svg(kind.title(), x, &series, kind.log_y()))
}

/// Writes an SVG next to every known CSV present in `dir`.
pub fn render_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for kind in [PlotKind::Energy, PlotKind::Ratio, PlotKind::Accuracy] {
        let csv_path = dir.join(kind.csv_name());
        if !csv_path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
        let svg = render_csv(kind, &text)?;
        let out = dir.join(kind.svg_name());
        std::fs::write(&out, svg).map_err(|e| CliError::io(&out, e))?;
        written.push(out);
    }
    Ok(written)
}

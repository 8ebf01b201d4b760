//! Line charts of tab-separated tables, rendered as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Numeric table: one x column and one or more y columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub x_label: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// Points with a non-numeric cell (for example `NA`) are left out.
    pub points: Vec<(f64, f64)>,
}

/// Parses a TSV with a header line. `x_column` names the abscissa (the first
/// column when `None`); `y_columns` selects series (all other numeric
/// columns when empty). Lines starting with `#` are skipped.
pub fn parse_table(text: &str, x_column: Option<&str>, y_columns: &[String]) -> Result<Table> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::validation("table is empty"))?
        .split('\t')
        .collect();
    let x_idx = match x_column {
        Some(name) => header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::validation(format!("no column named {name}")))?,
        None => 0,
    };
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    for (k, r) in rows.iter().enumerate() {
        ensure!(
            r.len() == header.len(),
            "row {} has {} fields, header has {}",
            k + 1,
            r.len(),
            header.len()
        );
    }
    let numeric = |i: usize| rows.iter().any(|r| r[i].parse::<f64>().is_ok());
    let y_idx: Vec<usize> = if y_columns.is_empty() {
        (0..header.len()).filter(|&i| i != x_idx && numeric(i)).collect()
    } else {
        y_columns
            .iter()
            .map(|name| {
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::validation(format!("no column named {name}")))
            })
            .collect::<Result<_>>()?
    };
    ensure!(!y_idx.is_empty(), "table has no numeric series to plot");
    let series = y_idx
        .into_iter()
        .map(|i| Series {
            name: header[i].to_string(),
            points: rows
                .iter()
                .filter_map(|r| Some((r[x_idx].parse::<f64>().ok()?, r[i].parse::<f64>().ok()?)))
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect(),
        })
        .collect();
    Ok(Table {
        x_label: header[x_idx].to_string(),
        series,
    })
}

pub fn read_table(path: impl AsRef<Path>, x_column: Option<&str>, y_columns: &[String]) -> Result<Table> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, x_column, y_columns)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// SVG document with one polyline per series, axes, ticks and a legend.
pub fn line_chart_svg(table: &Table, title: &str, y_label: &str) -> Result<String> {
    ensure!(
        table.series.iter().any(|s| !s.points.is_empty()),
        "nothing to plot: every series is empty"
    );
    let all = || table.series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = padded_range(all().map(|p| p.0));
    let (y0, y1) = padded_range(all().map(|p| p.1));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=TICKS {
        let f = k as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let bottom = MARGIN_TOP + ph;
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{bottom}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 5.0,
            bottom + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(&table.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0:.2}" text-anchor="middle" transform="rotate(-90 16 {0:.2})">{1}</text>"#,
        MARGIN_TOP + ph / 2.0,
        escape(y_label)
    );
    for (k, series) in table.series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = series
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if points.len() == 1 {
            let _ = writeln!(s, r#"<circle cx="{}" r="3" fill="{colour}"/>"#, points[0].replacen(',', "\" cy=\"", 1));
        } else if !points.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            );
        }
        let ly = MARGIN_TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_line_chart(table: &Table, title: &str, y_label: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, line_chart_svg(table, title, y_label)?).map_err(|e| Error::io(path, e))
}

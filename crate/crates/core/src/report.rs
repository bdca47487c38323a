//! Markdown summaries and SVG line plots of metrics CSV files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A numeric CSV table; empty cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidValue { key: name.into(), message: "empty CSV".into() })?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(Error::InvalidValue {
                    key: name.into(),
                    message: format!("row {} has {} cells, header has {}", i + 2, cells.len(), columns.len()),
                });
            }
            let row = cells
                .iter()
                .map(|c| {
                    let c = c.trim();
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|_| Error::InvalidValue {
                            key: name.into(),
                            message: format!("row {}: `{c}` is not a number", i + 2),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { name: name.to_string(), columns, rows })
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().enumerate().filter_map(move |(r, row)| row[idx].map(|v| (r, v)))
    }
}

/// Markdown table with the last, minimum and maximum value of every column.
pub fn summarize(tables: &[Table]) -> String {
    let mut out = String::from("# Run report\n");
    for t in tables {
        let _ = writeln!(out, "\n## {}\n\n{} rows\n", t.name, t.rows.len());
        out.push_str("| column | last | min | max |\n|---|---|---|---|\n");
        for (i, c) in t.columns.iter().enumerate() {
            let vals: Vec<f64> = t.column(i).map(|(_, v)| v).collect();
            let Some(last) = vals.last() else {
                let _ = writeln!(out, "| {c} | | | |");
                continue;
            };
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(out, "| {c} | {} | {} | {} |", fmt(*last), fmt(min), fmt(max));
        }
    }
    out
}

fn fmt(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e12 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Line plot of column `y` against column `x` (row index when `x` is `None`).
pub fn svg_plot(t: &Table, x: Option<usize>, y: usize) -> String {
    const W: f64 = 480.0;
    const H: f64 = 240.0;
    const M: f64 = 40.0;
    let pts: Vec<(f64, f64)> = t
        .column(y)
        .map(|(r, v)| (x.and_then(|xi| t.rows[r][xi]).unwrap_or(r as f64), v))
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .collect();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
    let path: Vec<String> = pts.iter().map(|(a, b)| format!("{:.1},{:.1}", sx(*a), sy(*b))).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M},{M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    let _ = writeln!(s, r#"<text x="{M}" y="{}">{}: {}</text>"#, M - 10.0, t.name, t.columns[y]);
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, M + 4.0, fmt(y1));
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, H - M, fmt(y0));
    let _ = writeln!(s, r#"<text x="{M}" y="{}">{}</text>"#, H - M + 16.0, fmt(x0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, W - M, H - M + 16.0, fmt(x1));
    if !path.is_empty() {
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Writes `report.md` plus one SVG per non-step column of each input into `out`.
pub fn render_report(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut tables = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        tables.push(Table::parse(&name, &text)?);
    }
    let mut written = Vec::new();
    for (ti, t) in tables.iter().enumerate() {
        let x = t.columns.iter().position(|c| c == "step");
        for y in (0..t.columns.len()).filter(|i| Some(*i) != x) {
            let path = out.join(format!("{ti:02}-{}-{}.svg", t.name, t.columns[y]));
            std::fs::write(&path, svg_plot(t, x, y)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            written.push(path);
        }
    }
    let md = out.join("report.md");
    std::fs::write(&md, summarize(&tables)).map_err(|e| Error::io(format!("writing {}", md.display()), e))?;
    written.push(md);
    Ok(written)
}

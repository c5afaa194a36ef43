//! Minimal deterministic SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::table::{write_atomic, ResultTable};

#[derive(Clone, Debug, PartialEq)]
pub struct AxesSpec {
    pub x: String,
    pub y: String,
    /// Column whose distinct values split rows into series.
    pub series: Option<String>,
    pub x_log: bool,
    pub y_log: bool,
    pub title: String,
}

impl AxesSpec {
    pub fn new(x: &str, y: &str) -> Self {
        AxesSpec {
            x: x.to_string(),
            y: y.to_string(),
            series: None,
            x_log: false,
            y_log: false,
            title: String::new(),
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn transform(v: f64, log: bool, axis: &str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite value on the {axis} axis")));
    }
    if log {
        if v <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "non-positive value {v} on the log {axis} axis"
            )));
        }
        Ok(v.log10())
    } else {
        Ok(v)
    }
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// SVG text of the plot; one polyline per series.
pub fn svg_string(table: &ResultTable, axes: &AxesSpec) -> Result<String> {
    let xs = table.numbers(&axes.x)?;
    let ys = table.numbers(&axes.y)?;
    let keys = match &axes.series {
        Some(c) => table.strings(c)?,
        None => vec![axes.y.clone(); xs.len()],
    };
    let tx: Vec<f64> = xs
        .iter()
        .map(|&v| transform(v, axes.x_log, "x"))
        .collect::<Result<_>>()?;
    let ty: Vec<f64> = ys
        .iter()
        .map(|&v| transform(v, axes.y_log, "y"))
        .collect::<Result<_>>()?;
    if tx.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let (x0, x1) = bounds(&tx);
    let (y0, y1) = bounds(&ty);
    let px = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    // series in first-appearance order
    let mut names: Vec<&String> = Vec::new();
    for k in &keys {
        if !names.contains(&k) {
            names.push(k);
        }
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let label = |name: &str, log: bool| if log { format!("log10 {name}") } else { name.to_string() };
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        W / 2.0,
        H - 15.0,
        escape(&label(&axes.x, axes.x_log))
    );
    let _ = writeln!(
        s,
        "<text x=\"15\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 15 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(&label(&axes.y, axes.y_log))
    );
    if !axes.title.is_empty() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
            W / 2.0,
            escape(&axes.title)
        );
    }
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"{anchor}\" font-size=\"11\">{v:.3}</text>",
            px(v),
            H - MARGIN + 15.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{v:.3}</text>",
            MARGIN - 5.0,
            py(v) + 4.0
        );
    }
    for (i, name) in names.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = keys
            .iter()
            .zip(tx.iter().zip(&ty))
            .filter(|(k, _)| k == name)
            .map(|(_, (&a, &b))| (a, b))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            coords.join(" ")
        );
        let ly = MARGIN + 15.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\" text-anchor=\"end\" font-size=\"12\">{}</text>",
            W - MARGIN - 5.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn svg_plot(table: &ResultTable, axes: &AxesSpec, path: &Path) -> Result<()> {
    let s = svg_string(table, axes)?;
    write_atomic(path, s.as_bytes())
}

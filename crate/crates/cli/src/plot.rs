//! Standalone SVG line charts of metrics columns.
//!
//! Several runs of the same schema are drawn as faint per-run traces under
//! a bold mean. The mean at an x value averages the runs that have a value
//! there.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{CliError, Result};
use crate::metrics::Table;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 50.0;

pub type Series = Vec<(f64, f64)>;

/// Columns plotted as magnitudes.
pub fn plotted_as_magnitude(column: &str) -> bool {
    column == "actor_loss"
}

pub fn axis_label(column: &str) -> String {
    if plotted_as_magnitude(column) {
        format!("|{column}|")
    } else {
        column.to_string()
    }
}

/// `(x, y)` pairs of `column` against the first column, skipping empty cells.
pub fn series(table: &Table, column: &str) -> Result<Series> {
    let i = table
        .columns
        .iter()
        .position(|c| c == column)
        .ok_or_else(|| CliError::Metrics(format!("no column `{column}`")))?;
    let abs = plotted_as_magnitude(column);
    Ok(table
        .rows
        .iter()
        .filter_map(|r| match (r[0], r[i]) {
            (Some(x), Some(y)) if y.is_finite() => Some((x, if abs { y.abs() } else { y })),
            _ => None,
        })
        .collect())
}

pub fn mean_series(runs: &[Series]) -> Series {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for run in runs {
        for &(x, y) in run {
            // bit pattern that sorts like the float
            let e = acc.entry(order_key(x)).or_insert((x, 0.0, 0));
            e.1 += y;
            e.2 += 1;
        }
    }
    acc.into_values().map(|(x, s, n)| (x, s / n as f64)).collect()
}

fn order_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Every table must share the first table's columns.
pub fn check_schema(tables: &[(String, Table)]) -> Result<()> {
    let Some((first_name, first)) = tables.first() else {
        return Err(CliError::Metrics("no metrics files given".into()));
    };
    for (name, t) in &tables[1..] {
        if t.columns != first.columns {
            return Err(CliError::Metrics(format!(
                "schema mismatch: {name} has columns {:?} but {first_name} has {:?}",
                t.columns, first.columns
            )));
        }
    }
    Ok(())
}

/// One chart of `column` over all runs.
pub fn line_chart(runs: &[Series], x_label: &str, column: &str) -> String {
    let y_label = axis_label(column);
    let points = runs.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&y_label)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&y_label)
    );
    let polyline = |svg: &mut String, s: &Series, class: &str, style: &str| {
        let pts: Vec<String> = s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="{class}" points="{}" fill="none" {style}/>"#,
            pts.join(" ")
        );
    };
    if runs.len() == 1 {
        polyline(&mut svg, &runs[0], "mean", r##"stroke="#1f4e9c" stroke-width="2""##);
    } else {
        for run in runs {
            polyline(&mut svg, run, "run", r##"stroke="#1f4e9c" stroke-opacity="0.25" stroke-width="1""##);
        }
        polyline(&mut svg, &mean_series(runs), "mean", r##"stroke="#1f4e9c" stroke-width="2.5""##);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter of 2-D points coloured by integer label.
pub fn scatter_chart(points: &[(f64, f64)], labels: &[usize], title: &str) -> String {
    const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || x1 - x0 < 1e-12 {
        (x0, x1) = (x0.min(0.0) - 1.0, x1.max(0.0) + 1.0);
    }
    if !y0.is_finite() || y1 - y0 < 1e-12 {
        (y0, y1) = (y0.min(0.0) - 1.0, y1.max(0.0) + 1.0);
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">PC1</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">PC2</text>"#,
        TOP + ph / 2.0
    );
    for (&(x, y), &l) in points.iter().zip(labels) {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            LEFT + (x - x0) / (x1 - x0) * pw,
            TOP + ph - (y - y0) / (y1 - y0) * ph,
            PALETTE[l % PALETTE.len()]
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

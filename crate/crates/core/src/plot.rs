//! Learning-curve emission: an SVG line chart plus a CSV beside it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::CurveReport;

pub const CURVE_CSV_HEADER: [&str; 10] = [
    "budget",
    "micro_p",
    "micro_r",
    "micro_f1",
    "accuracy",
    "miou",
    "mean_image_iou",
    "macro_p",
    "macro_r",
    "macro_f1",
];

/// One CSV row: budget followed by the nine metrics in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub budget: usize,
    pub values: [f64; 9],
}

pub fn curve_rows(report: &CurveReport) -> Vec<CurveRow> {
    report
        .entries
        .iter()
        .map(|e| {
            let m = &e.metrics;
            CurveRow {
                budget: e.budget,
                values: [
                    m.micro_precision,
                    m.micro_recall,
                    m.micro_f1,
                    m.accuracy,
                    m.miou,
                    m.mean_image_iou,
                    m.macro_precision,
                    m.macro_recall,
                    m.macro_f1,
                ],
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::DecodeFailure(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_curve_csv(report: &CurveReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CURVE_CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for row in curve_rows(report) {
        let mut rec = vec![row.budget.to_string()];
        rec.extend(row.values.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CURVE_CSV_HEADER) {
        return Err(Error::DecodeFailure(format!("unexpected curve header in {}", path.display())));
    }
    let bad = |what: &str| Error::DecodeFailure(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let budget = rec[0].parse().map_err(|_| bad("budget"))?;
        let mut values = [0.0; 9];
        for (i, v) in values.iter_mut().enumerate() {
            *v = rec[i + 1].parse().map_err(|_| bad(CURVE_CSV_HEADER[i + 1]))?;
        }
        rows.push(CurveRow { budget, values });
    }
    Ok(rows)
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

/// SVG chart with one polyline per metric against budget.
pub fn render_curve_svg(rows: &[CurveRow]) -> String {
    let (width, height) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 30.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let min_b = rows.iter().map(|r| r.budget).min().unwrap_or(0) as f64;
    let max_b = rows.iter().map(|r| r.budget).max().unwrap_or(0) as f64;
    let x_of = |b: usize| {
        if max_b > min_b {
            left + (b as f64 - min_b) / (max_b - min_b) * plot_w
        } else {
            left + plot_w / 2.0
        }
    };
    let y_of = |v: f64| top + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y_of(v);
        writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, left + plot_w).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0).unwrap();
    }
    for r in rows {
        let x = x_of(r.budget);
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top + plot_h + 16.0, r.budget).unwrap();
    }
    writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">annotated training samples</text>"#,
        left + plot_w / 2.0,
        height - 12.0
    )
    .unwrap();
    for (m, color) in PALETTE.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x_of(r.budget), y_of(r.values[m])))
            .collect();
        if points.len() > 1 {
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        }
        for r in rows {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x_of(r.budget), y_of(r.values[m])).unwrap();
        }
        let ly = top + 10.0 + m as f64 * 18.0;
        let lx = left + plot_w + 14.0;
        writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, CURVE_CSV_HEADER[m + 1]).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the chart to `out` and the CSV to `out` with a `.csv` extension;
/// returns the CSV path.
pub fn emit_curve_plot(report: &CurveReport, out: &Path) -> Result<PathBuf> {
    if report.entries.is_empty() {
        return Err(Error::EmptyList);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(out, render_curve_svg(&curve_rows(report))).map_err(|e| Error::io(out, e))?;
    let csv_path = out.with_extension("csv");
    write_curve_csv(report, &csv_path)?;
    Ok(csv_path)
}

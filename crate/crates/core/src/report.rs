//! Text tables, CSV export and forgetting-curve plots for metric matrices.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{accumulated_forgetting, miou_average, MetricMatrix};

pub const TABLE_FILE: &str = "report.txt";
pub const CSV_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "forgetting.png";
pub const COMPARE_FILE: &str = "compare.txt";

/// One decimal, without a negative zero.
fn one_decimal(v: f64) -> String {
    format!("{:.1}", (v * 10.0).round() / 10.0 + 0.0)
}

fn signed_one_decimal(v: f64) -> String {
    format!("{:+.1}", (v * 10.0).round() / 10.0 + 0.0)
}

fn cells(m: &MetricMatrix) -> Result<Vec<String>> {
    let k = m.len();
    if k == 0 {
        return Err(Error::Metric("empty metric matrix".into()));
    }
    let last = k - 1;
    let mut out = Vec::with_capacity(k + 2);
    for t in 0..k {
        let fin = m
            .get(t, last)
            .ok_or_else(|| Error::Metric(format!("missing final score for {}", m.targets[t])))?;
        let cell = if t < last {
            let first = m
                .get(t, t)
                .ok_or_else(|| Error::Metric(format!("missing initial score for {}", m.targets[t])))?;
            format!("{} ({})", one_decimal(fin), signed_one_decimal(fin - first))
        } else {
            one_decimal(fin)
        };
        out.push(cell);
    }
    out.push(one_decimal(miou_average(m)?));
    out.push(one_decimal(accumulated_forgetting(m)?));
    Ok(out)
}

fn layout(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{:<w$}", cell, w = width[c]);
            } else {
                let _ = write!(s, "  {:>w$}", cell, w = width[c]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Final mIoU per target with its change since the target was learned,
/// then mIoU Avg. and A.F., one row per named run.
pub fn render_table(runs: &[(String, &MetricMatrix)]) -> Result<String> {
    let first = runs.first().ok_or_else(|| Error::Metric("nothing to report".into()))?.1;
    let mut header = vec!["Method".to_string()];
    header.extend(first.targets.iter().cloned());
    header.push("mIoU Avg.".into());
    header.push("A.F.".into());
    let mut rows = Vec::new();
    for (name, m) in runs {
        if m.targets != first.targets {
            return Err(Error::Metric(format!("run {name} has a different target sequence")));
        }
        let mut row = vec![name.clone()];
        row.extend(cells(m)?);
        rows.push(row);
    }
    Ok(layout(&header, &rows))
}

/// Like [`render_table`] with an extra column: A.F. minus the first run's.
pub fn render_comparison(runs: &[(String, &MetricMatrix)]) -> Result<String> {
    let table = render_table(runs)?;
    let reference = accumulated_forgetting(runs[0].1)?;
    let mut lines: Vec<String> = table.lines().map(str::to_string).collect();
    let width = lines.iter().map(|l| l.len()).max().unwrap_or(0);
    let deltas: Vec<String> = runs
        .iter()
        .map(|(_, m)| accumulated_forgetting(m).map(|af| signed_one_decimal(af - reference)))
        .collect::<Result<_>>()?;
    let dw = deltas.iter().map(String::len).max().unwrap_or(0).max("Δ A.F.".chars().count());
    let pad = |s: &str| format!("{}{}", " ".repeat(dw - s.chars().count()), s);
    lines[0] = format!("{:<width$}  {}", lines[0], pad("Δ A.F."));
    lines[1] = "-".repeat(width + 2 + dw);
    for (i, d) in deltas.iter().enumerate() {
        lines[i + 2] = format!("{:<width$}  {}", lines[i + 2], pad(d));
    }
    Ok(lines.join("\n") + "\n")
}

/// `target,step,miou` rows (1-based steps) at full precision.
pub fn matrix_to_csv(m: &MetricMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "step", "miou"])?;
    for (t, tag) in m.targets.iter().enumerate() {
        for s in t..m.len() {
            if let Some(v) = m.get(t, s) {
                w.write_record([tag.clone(), (s + 1).to_string(), format!("{v:?}")])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Metric(e.to_string()))
}

pub fn matrix_from_csv(s: &str) -> Result<MetricMatrix> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let mut entries = Vec::new();
    let mut targets: Vec<String> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (tag, step, v) = match (rec.get(0), rec.get(1), rec.get(2)) {
            (Some(a), Some(b), Some(c)) => (a.to_string(), b, c),
            _ => return Err(Error::Metric("CSV rows need target,step,miou".into())),
        };
        let step: usize = step.parse().map_err(|_| Error::Metric(format!("bad step {step:?}")))?;
        let v: f64 = v.parse().map_err(|_| Error::Metric(format!("bad mIoU {v:?}")))?;
        if !targets.contains(&tag) {
            targets.push(tag.clone());
        }
        entries.push((tag, step, v));
    }
    let mut m = MetricMatrix::new(targets.clone());
    for (tag, step, v) in entries {
        let t = targets.iter().position(|x| *x == tag).expect("collected above");
        if step == 0 {
            return Err(Error::Metric("steps are 1-based".into()));
        }
        m.set(t, step - 1, v, None)?;
    }
    Ok(m)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: i64) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=n {
        let x = x0 + (x1 - x0) * i / n;
        let y = y0 + (y1 - y0) * i / n;
        for dy in -thick..=thick {
            for dx in -thick..=thick {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, c);
                }
            }
        }
    }
}

/// mIoU of every target against the step index, one coloured polyline per
/// target (colours in target order), y axis 0..100 with gridlines every 10.
pub fn render_curves(m: &MetricMatrix) -> RgbImage {
    let (w, h, margin) = (480u32, 320u32, 30i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pw, ph) = (w as i64 - 2 * margin, h as i64 - 2 * margin);
    let k = m.len().max(1);
    let px = |s: usize| margin + if k > 1 { pw * s as i64 / (k as i64 - 1) } else { pw / 2 };
    let py = |v: f64| margin + ph - (ph as f64 * v.clamp(0.0, 100.0) / 100.0).round() as i64;
    for g in 0..=10 {
        let y = py(g as f64 * 10.0);
        draw_line(&mut img, (margin, y), (margin + pw, y), Rgb([225, 225, 225]), 0);
    }
    for s in 0..k {
        draw_line(&mut img, (px(s), margin), (px(s), margin + ph), Rgb([225, 225, 225]), 0);
    }
    draw_line(&mut img, (margin, margin), (margin, margin + ph), Rgb([0, 0, 0]), 0);
    draw_line(&mut img, (margin, margin + ph), (margin + pw, margin + ph), Rgb([0, 0, 0]), 0);
    for t in 0..m.len() {
        let c = Rgb(PALETTE[t % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = (t..m.len()).filter_map(|s| m.get(t, s).map(|v| (px(s), py(v)))).collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], c, 1);
        }
        for &p in &pts {
            draw_line(&mut img, p, p, c, 3);
        }
    }
    img
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub csv: PathBuf,
    pub curves: PathBuf,
}

/// Writes the table, CSV and curve plot for one run into `out_dir`.
pub fn render_report(m: &MetricMatrix, name: &str, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        table: out_dir.join(TABLE_FILE),
        csv: out_dir.join(CSV_FILE),
        curves: out_dir.join(CURVES_FILE),
    };
    std::fs::write(&files.table, render_table(&[(name.to_string(), m)])?)?;
    std::fs::write(&files.csv, matrix_to_csv(m)?)?;
    render_curves(m).save(&files.curves)?;
    Ok(files)
}

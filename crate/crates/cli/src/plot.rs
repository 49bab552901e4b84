//! Static PNG charts of training curves and sweep summaries.
//!
//! There is no font rendering, so every chart is written with a CSV of the
//! plotted values alongside it; series colours are listed in that CSV header.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use lbt_core::experiment::SweepResult;
use lbt_core::trainer::{read_metrics, MetricsRecord};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("blue", [31, 119, 180]),
    ("orange", [255, 127, 14]),
    ("green", [44, 160, 44]),
    ("red", [214, 39, 40]),
    ("purple", [148, 103, 189]),
    ("brown", [140, 86, 75]),
    ("pink", [227, 119, 194]),
    ("grey", [127, 127, 127]),
];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

/// Plots whatever `dir` holds: a training run (`metrics.jsonl`), a sweep
/// (`results.json`) or both. Returns the files written.
pub fn plot_dir(dir: &Path, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let metrics = dir.join("metrics.jsonl");
    let results = dir.join("results.json");
    if !metrics.exists() && !results.exists() {
        bail!("{} holds neither metrics.jsonl nor results.json", dir.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    if metrics.exists() {
        let records = read_metrics(&metrics)?;
        written.extend(plot_run(&records, out)?);
    }
    if results.exists() {
        let text = std::fs::read_to_string(&results)?;
        let sweep: SweepResult = serde_json::from_str(&text).context("parsing results.json")?;
        written.extend(plot_sweep(&sweep, out)?);
    }
    Ok(written)
}

fn plot_run(records: &[MetricsRecord], out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let it = |r: &MetricsRecord| r.iteration as f64;
    let loss_fields: [(&str, fn(&MetricsRecord) -> f64); 5] = [
        ("total", |r| r.loss.total),
        ("supervised", |r| r.loss.rpn_cls + r.loss.rpn_reg + r.loss.roi_cls + r.loss.roi_reg),
        ("con_loc", |r| r.loss.con_loc),
        ("unsup", |r| r.loss.unsup_rpn_cls + r.loss.unsup_roi_cls + r.loss.unsup_reg),
        ("roi_cls", |r| r.loss.roi_cls),
    ];
    let losses: Vec<Series> = loss_fields
        .iter()
        .map(|(name, f)| Series {
            name: name.to_string(),
            points: records.iter().map(|r| (it(r), f(r))).collect(),
        })
        .collect();
    written.extend(emit(&losses, &out.join("loss_curve"))?);

    let mut ap = Vec::new();
    for (name, pick) in [
        ("teacher_AP50", (|r: &MetricsRecord| r.teacher.map(|e| e.ap50)) as fn(&MetricsRecord) -> Option<f64>),
        ("student_AP50", |r| r.student.map(|e| e.ap50)),
        ("teacher_mAP", |r| r.teacher.map(|e| e.map)),
        ("student_mAP", |r| r.student.map(|e| e.map)),
    ] {
        let points: Vec<(f64, f64)> = records.iter().filter_map(|r| pick(r).map(|v| (it(r), v))).collect();
        if !points.is_empty() {
            ap.push(Series {
                name: name.into(),
                points,
            });
        }
    }
    if !ap.is_empty() {
        written.extend(emit(&ap, &out.join("ap_curve"))?);
    }
    Ok(written)
}

fn emit(series: &[Series], stem: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let png = stem.with_extension("png");
    let csv = stem.with_extension("csv");
    line_chart(series).save(&png).with_context(|| format!("writing {}", png.display()))?;
    let mut text = String::from("series,colour,x,y\n");
    for (i, s) in series.iter().enumerate() {
        for (x, y) in &s.points {
            let _ = writeln!(text, "{},{},{x},{y}", s.name, PALETTE[i % PALETTE.len()].0);
        }
    }
    std::fs::write(&csv, text)?;
    Ok(vec![png, csv])
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f32, f32) {
        let w = (WIDTH - 2 * MARGIN) as f64;
        let h = (HEIGHT - 2 * MARGIN) as f64;
        let fx = if self.x1 > self.x0 { (x - self.x0) / (self.x1 - self.x0) } else { 0.5 };
        let fy = if self.y1 > self.y0 { (y - self.y0) / (self.y1 - self.y0) } else { 0.5 };
        (
            (MARGIN as f64 + fx * w) as f32,
            (HEIGHT as f64 - MARGIN as f64 - fy * h) as f32,
        )
    }
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for k in 1..5 {
        let y = (MARGIN + k * (HEIGHT - 2 * MARGIN) / 5) as f32;
        let x = (MARGIN + k * (WIDTH - 2 * MARGIN) / 5) as f32;
        draw_line_segment_mut(&mut img, (MARGIN as f32, y), ((WIDTH - MARGIN) as f32, y), grid);
        draw_line_segment_mut(&mut img, (x, MARGIN as f32), (x, (HEIGHT - MARGIN) as f32), grid);
    }
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(MARGIN as i32, MARGIN as i32).of_size(WIDTH - 2 * MARGIN + 1, HEIGHT - 2 * MARGIN + 1),
        Rgb([0, 0, 0]),
    );
    img
}

fn line_chart(series: &[Series]) -> RgbImage {
    let all = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return canvas();
    }
    let frame = Frame {
        x0,
        x1,
        y0: 0.0,
        y1: if y1 > 0.0 { y1 * 1.05 } else { 1.0 },
    };
    let mut img = canvas();
    for (i, s) in series.iter().enumerate() {
        let colour = Rgb(PALETTE[i % PALETTE.len()].1);
        let pts: Vec<(f32, f32)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| frame.px(x, y.max(0.0)))
            .collect();
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, w[0], w[1], colour);
        }
        if pts.len() == 1 {
            let (x, y) = pts[0];
            draw_filled_rect_mut(&mut img, Rect::at(x as i32 - 2, y as i32 - 2).of_size(5, 5), colour);
        }
    }
    img
}

/// Grouped bars: one group per label fraction, one bar per method, height
/// the mean reported AP50 with a whisker of one standard deviation.
fn plot_sweep(sweep: &SweepResult, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut fractions: Vec<f64> = sweep.summary.iter().map(|r| r.fraction).collect();
    fractions.sort_by(|a, b| a.total_cmp(b));
    fractions.dedup();
    let mut methods = Vec::new();
    for r in &sweep.summary {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let top = sweep
        .summary
        .iter()
        .map(|r| r.ap50_mean + r.ap50_std)
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    let frame = Frame {
        x0: 0.0,
        x1: fractions.len() as f64,
        y0: 0.0,
        y1: top,
    };
    let mut img = canvas();
    let mut csv = String::from("method,colour,fraction,ap50_mean,ap50_std,map_mean,map_std,runs\n");
    let slot = 0.8 / methods.len().max(1) as f64;
    for row in &sweep.summary {
        let g = fractions.iter().position(|f| *f == row.fraction).unwrap_or(0) as f64;
        let m = methods.iter().position(|m| *m == row.method).unwrap_or(0);
        let (name, rgb) = PALETTE[m % PALETTE.len()];
        let colour = Rgb(rgb);
        let left = g + 0.1 + m as f64 * slot;
        let (xa, ya) = frame.px(left, row.ap50_mean);
        let (xb, yb) = frame.px(left + slot * 0.9, 0.0);
        let w = (xb - xa).max(1.0) as u32;
        let h = (yb - ya).max(1.0) as u32;
        draw_filled_rect_mut(&mut img, Rect::at(xa as i32, ya as i32).of_size(w, h), colour);
        let cx = (xa + xb) / 2.0;
        let (_, lo) = frame.px(0.0, (row.ap50_mean - row.ap50_std).max(0.0));
        let (_, hi) = frame.px(0.0, row.ap50_mean + row.ap50_std);
        draw_line_segment_mut(&mut img, (cx, lo), (cx, hi), Rgb([0, 0, 0]));
        let _ = writeln!(
            csv,
            "{},{name},{},{},{},{},{},{}",
            row.method.name(),
            row.fraction,
            row.ap50_mean,
            row.ap50_std,
            row.map_mean,
            row.map_std,
            row.runs
        );
    }
    let png = out.join("sweep_bars.png");
    let csv_path = out.join("sweep_bars.csv");
    img.save(&png).with_context(|| format!("writing {}", png.display()))?;
    std::fs::write(&csv_path, csv)?;
    Ok(vec![png, csv_path])
}

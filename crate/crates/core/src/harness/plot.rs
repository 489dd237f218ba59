//! Training-curve rasters. Charts carry no text; `series.json` in the bundle
//! maps each file and line colour to its series.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::report::EvalReport;
use crate::error::Result;
use crate::model::EpochRecord;
use crate::util;

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;

const SERIES: [(&str, [u8; 3]); 4] = [
    ("train_accuracy", [31, 119, 180]),
    ("eval_accuracy", [255, 127, 14]),
    ("eval_f1", [44, 160, 44]),
    ("eval_recall", [214, 39, 40]),
];

#[derive(Serialize)]
struct SeriesEntry {
    name: &'static str,
    color: String,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct ChartEntry {
    file: String,
    report: String,
    role: String,
    y_range: [f64; 2],
    series: Vec<SeriesEntry>,
}

fn series_of(history: &[EpochRecord]) -> Vec<(&'static str, [u8; 3], Vec<f64>)> {
    let pick = |f: &dyn Fn(&EpochRecord) -> Option<f64>| -> Option<Vec<f64>> {
        history
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
    };
    let columns: [Option<Vec<f64>>; 4] = [
        pick(&|r| r.train_acc),
        pick(&|r| r.eval_acc),
        pick(&|r| r.eval_binary.map(|b| b.f1)),
        pick(&|r| r.eval_binary.map(|b| b.recall)),
    ];
    SERIES
        .iter()
        .zip(columns)
        .filter_map(|(&(name, color), v)| v.map(|v| (name, color, v)))
        .collect()
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment, drawn 2 px thick.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x + 1, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn to_px(i: usize, n: usize, v: f64) -> (i64, i64) {
    let plot_w = f64::from(W - 2 * MARGIN);
    let plot_h = f64::from(H - 2 * MARGIN);
    let x = if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    };
    (
        (f64::from(MARGIN) + x * plot_w).round() as i64,
        (f64::from(H - MARGIN) - v.clamp(0.0, 1.0) * plot_h).round() as i64,
    )
}

fn render(series: &[(&'static str, [u8; 3], Vec<f64>)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for q in 1..=4 {
        let (_, y) = to_px(0, 2, f64::from(q) * 0.25);
        line(
            &mut img,
            (i64::from(MARGIN), y),
            (i64::from(W - MARGIN), y),
            grid,
        );
    }
    let black = Rgb([0, 0, 0]);
    let (x0, y0) = (i64::from(MARGIN), i64::from(H - MARGIN));
    line(&mut img, (x0, y0), (i64::from(W - MARGIN), y0), black);
    line(&mut img, (x0, y0), (x0, i64::from(MARGIN)), black);
    for (_, color, values) in series {
        let c = Rgb(*color);
        let n = values.len();
        for i in 0..n {
            let p = to_px(i, n, values[i]);
            for d in -2..=2 {
                put(&mut img, p.0 + d, p.1 - 2, c);
                put(&mut img, p.0 + d, p.1 + 2, c);
                put(&mut img, p.0 - 2, p.1 + d, c);
                put(&mut img, p.0 + 2, p.1 + d, c);
            }
            if i + 1 < n {
                line(&mut img, p, to_px(i + 1, n, values[i + 1]), c);
            }
        }
        // Tick per epoch on the x axis.
        for i in 0..n {
            let (x, _) = to_px(i, n, 0.0);
            line(&mut img, (x, y0), (x, y0 + 4), black);
        }
    }
    img
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

/// One PNG per (report, trained model) plus `series.json`.
pub fn write_plot_bundle(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut index = Vec::new();
    for (ri, r) in reports.iter().enumerate() {
        for (role, history) in &r.histories {
            let series = series_of(history);
            if series.is_empty() {
                continue;
            }
            let file = format!("{ri:02}-{}-{}.png", slug(&r.name), slug(role));
            let path = dir.join(&file);
            let mut bytes = Vec::new();
            render(&series).write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Png,
            )?;
            util::write_bytes_atomic(&path, &bytes)?;
            written.push(path);
            index.push(ChartEntry {
                file,
                report: r.name.clone(),
                role: role.clone(),
                y_range: [0.0, 1.0],
                series: series
                    .into_iter()
                    .map(|(name, c, values)| SeriesEntry {
                        name,
                        color: format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
                        values,
                    })
                    .collect(),
            });
        }
    }
    let idx = dir.join("series.json");
    util::write_json_atomic(&idx, &index)?;
    written.push(idx);
    Ok(written)
}

//! PNG rendering of loss curves, gate heatmaps, and prediction dumps.
//! Hand-rolled rasterization; nothing here needs a plotting stack.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::router::GateReportRow;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);

fn draw_line(img: &mut RgbImage, a: (i32, i32), b: (i32, i32), color: Rgb<u8>) {
    // Bresenham
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn polyline(img: &mut RgbImage, points: &[(f64, f64)], color: Rgb<u8>) {
    for pair in points.windows(2) {
        draw_line(
            img,
            (pair[0].0 as i32, pair[0].1 as i32),
            (pair[1].0 as i32, pair[1].1 as i32),
            color,
        );
    }
}

/// Plot grand-total and distillation curves from step logs.
pub fn loss_curve(losses: &[LossBreakdown], out: &Path) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::config("no loss records to plot"));
    }
    let (w, h) = (640u32, 400u32);
    let margin = 40.0;
    let mut img = RgbImage::from_pixel(w, h, BG);

    let max_y = losses
        .iter()
        .map(|l| l.grand_total)
        .fold(f64::MIN_POSITIVE, f64::max);
    let min_y = 0.0;
    let steps = losses.len().max(2) as f64;

    let map = |i: usize, v: f64| -> (f64, f64) {
        let x = margin + (w as f64 - 2.0 * margin) * i as f64 / (steps - 1.0);
        let t = (v - min_y) / (max_y - min_y).max(1e-12);
        let y = (h as f64 - margin) - (h as f64 - 2.0 * margin) * t;
        (x, y)
    };

    draw_line(
        &mut img,
        (margin as i32, (h as f64 - margin) as i32),
        ((w as f64 - margin) as i32, (h as f64 - margin) as i32),
        AXIS,
    );
    draw_line(
        &mut img,
        (margin as i32, margin as i32),
        (margin as i32, (h as f64 - margin) as i32),
        AXIS,
    );

    let grand: Vec<(f64, f64)> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| map(i, l.grand_total))
        .collect();
    polyline(&mut img, &grand, Rgb([200, 40, 40]));
    let distill: Vec<(f64, f64)> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| map(i, l.distill_total))
        .collect();
    polyline(&mut img, &distill, Rgb([40, 90, 200]));

    img.save(out).map_err(|e| Error::Format(e.to_string()))
}

fn heat_color(t: f64) -> Rgb<u8> {
    // dark blue -> yellow ramp
    let t = t.clamp(0.0, 1.0);
    Rgb([
        (255.0 * t) as u8,
        (220.0 * t.powf(0.7)) as u8,
        (160.0 * (1.0 - t) + 40.0) as u8,
    ])
}

/// Heatmap of mean gate weights: one row per (task, level), one column
/// per expert.
pub fn gate_heatmap(rows: &[GateReportRow], out: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::config("no gate rows to plot"));
    }
    let mut keys: Vec<(String, usize)> = rows
        .iter()
        .map(|r| (r.task.clone(), r.level))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    keys.sort();
    let experts = rows.iter().map(|r| r.expert_id).max().unwrap() + 1;
    let cell = 40u32;
    let legend = 140u32;
    let mut img = RgbImage::from_pixel(
        legend + experts as u32 * cell,
        keys.len() as u32 * cell,
        BG,
    );
    for (ri, key) in keys.iter().enumerate() {
        for e in 0..experts {
            let weight = rows
                .iter()
                .find(|r| (&r.task, r.level) == (&key.0, key.1) && r.expert_id == e)
                .map(|r| r.mean_weight)
                .unwrap_or(0.0);
            let color = heat_color(weight);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(
                        legend + e as u32 * cell + x,
                        ri as u32 * cell + y,
                        color,
                    );
                }
            }
        }
    }
    img.save(out).map_err(|e| Error::Format(e.to_string()))
}

/// Fixed palette for class-index dumps.
fn palette(class: u16) -> Rgb<u8> {
    const COLORS: [[u8; 3]; 8] = [
        [0, 0, 0],
        [220, 60, 60],
        [60, 180, 75],
        [60, 100, 220],
        [240, 200, 60],
        [150, 60, 200],
        [70, 210, 210],
        [240, 140, 60],
    ];
    let c = COLORS[(class as usize) % COLORS.len()];
    Rgb(c)
}

/// Dump a class map as a paletted PNG.
pub fn segmentation_png(classes: &Array2<u16>, out: &Path) -> Result<()> {
    let (h, w) = classes.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, palette(classes[[y, x]]));
        }
    }
    img.save(out).map_err(|e| Error::Format(e.to_string()))
}

/// Raw 32-bit float raster: magic, dims, then row-major channel-major
/// little-endian values. A minimal container for normal/depth dumps.
pub fn write_f32_raster(planes: &[Array2<f64>], out: &Path) -> Result<()> {
    if planes.is_empty() {
        return Err(Error::config("no planes to write"));
    }
    let (h, w) = planes[0].dim();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"SAKR");
    bytes.extend_from_slice(&(planes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for plane in planes {
        if plane.dim() != (h, w) {
            return Err(Error::config("raster planes must share shape"));
        }
        for &v in plane.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(out)?;
    f.write_all(&bytes)?;
    Ok(())
}

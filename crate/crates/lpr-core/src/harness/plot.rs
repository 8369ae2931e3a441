//! Minimal PNG plotting for recall curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 40;

const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([210, 210, 210]);
const LINE: Rgb<u8> = Rgb([30, 90, 200]);

fn draw_line(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as u32).max(1);
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn draw_dot(img: &mut RgbImage, x: f32, y: f32, color: Rgb<u8>) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let px = x.round() as i64 + dx;
            let py = y.round() as i64 + dy;
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Render recall-at-k points as a polyline and save a PNG.
pub fn save_recall_curve(points: &[(usize, f64)], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Input("no recall points to plot".into()));
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let max_k = points.iter().map(|(k, _)| *k).max().unwrap().max(1) as f32;
    let plot_w = (W - 2 * MARGIN) as f32;
    let plot_h = (H - 2 * MARGIN) as f32;
    let to_x = |k: f32| MARGIN as f32 + (k - 1.0) / (max_k - 1.0).max(1.0) * plot_w;
    let to_y = |r: f32| (H - MARGIN) as f32 - r.clamp(0.0, 1.0) * plot_h;

    for quarter in 0..=4 {
        let y = to_y(quarter as f32 / 4.0);
        draw_line(&mut img, MARGIN as f32, y, (W - MARGIN) as f32, y, GRID);
    }
    // Axes.
    draw_line(&mut img, MARGIN as f32, to_y(0.0), (W - MARGIN) as f32, to_y(0.0), AXIS);
    draw_line(&mut img, MARGIN as f32, to_y(0.0), MARGIN as f32, to_y(1.0), AXIS);

    let mut prev: Option<(f32, f32)> = None;
    for &(k, r) in points {
        let (x, y) = (to_x(k as f32), to_y(r as f32));
        if let Some((px, py)) = prev {
            draw_line(&mut img, px, py, x, y, LINE);
        }
        draw_dot(&mut img, x, y, LINE);
        prev = Some((x, y));
    }
    img.save(path).map_err(|e| Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}

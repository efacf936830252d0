//! PNG rendering: tile panels for both training stages, prediction
//! overlays, and a small hand-rolled line plot for loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::{Error, Result};

const TILE: u32 = 128;
const PAD: u32 = 4;

fn to_tile(img: &Array2<f32>) -> RgbImage {
    let (h, w) = img.dim();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::new(TILE, TILE);
    for y in 0..TILE {
        for x in 0..TILE {
            let sr = (y as usize * h) / TILE as usize;
            let sc = (x as usize * w) / TILE as usize;
            let v = (((img[(sr, sc)] - lo) / range) * 255.0).clamp(0.0, 255.0) as u8;
            out.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
    out
}

fn blit(canvas: &mut RgbImage, tile: &RgbImage, col: u32, row: u32) {
    let x0 = PAD + col * (TILE + PAD);
    let y0 = PAD + row * (TILE + PAD);
    for y in 0..TILE {
        for x in 0..TILE {
            canvas.put_pixel(x0 + x, y0 + y, *tile.get_pixel(x, y));
        }
    }
}

fn grid_canvas(cols: u32, rows: u32) -> RgbImage {
    RgbImage::from_pixel(
        PAD + cols * (TILE + PAD),
        PAD + rows * (TILE + PAD),
        Rgb([24, 24, 24]),
    )
}

/// Pretraining panel: rows local/global, columns input, mask, reconstruction.
pub fn mae_panel(
    path: &Path,
    local: &Array2<f32>,
    local_mask: &Array2<f32>,
    local_recon: &Array2<f32>,
    global_view: &Array2<f32>,
    global_mask: &Array2<f32>,
    global_recon: &Array2<f32>,
) -> Result<()> {
    let mut canvas = grid_canvas(3, 2);
    for (i, img) in [local, local_mask, local_recon].iter().enumerate() {
        blit(&mut canvas, &to_tile(img), i as u32, 0);
    }
    for (i, img) in [global_view, global_mask, global_recon].iter().enumerate() {
        blit(&mut canvas, &to_tile(img), i as u32, 1);
    }
    canvas.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Adaptation panel: source row then target row, each with local view,
/// global view, label (or pseudo-label), local prediction, global
/// prediction, and mask map. Twelve tiles total.
pub fn mpl_panel(path: &Path, source_row: [&Array2<f32>; 6], target_row: [&Array2<f32>; 6]) -> Result<()> {
    let mut canvas = grid_canvas(6, 2);
    for (i, img) in source_row.iter().enumerate() {
        blit(&mut canvas, &to_tile(img), i as u32, 0);
    }
    for (i, img) in target_row.iter().enumerate() {
        blit(&mut canvas, &to_tile(img), i as u32, 1);
    }
    canvas.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn gray_rgb(img: &Array2<f32>, w: u32, h: u32) -> RgbImage {
    let (ih, iw) = img.dim();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let sr = (y as usize * ih) / h as usize;
            let sc = (x as usize * iw) / w as usize;
            let v = (img[(sr, sc)] * 255.0).clamp(0.0, 255.0) as u8;
            out.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
    out
}

/// Input, prediction as a 50%-opacity red overlay, and ground truth as the
/// same overlay style, side by side.
pub fn overlay_panel(
    path: &Path,
    input: &Array2<f32>,
    pred: &Array2<u8>,
    gt: &Array2<u8>,
) -> Result<()> {
    let (h, w) = input.dim();
    let (hw, hh) = (w as u32, h as u32);
    let mut canvas = RgbImage::from_pixel(3 * hw + 2 * PAD, hh, Rgb([24, 24, 24]));
    let base = gray_rgb(input, hw, hh);
    let overlay = |mask: &Array2<u8>| -> RgbImage {
        let mut img = base.clone();
        for ((r, c), &m) in mask.indexed_iter() {
            if m > 0 {
                let p = img.get_pixel_mut(c as u32, r as u32);
                p.0[0] = ((f32::from(p.0[0]) + 255.0) * 0.5) as u8;
                p.0[1] = (f32::from(p.0[1]) * 0.5) as u8;
                p.0[2] = (f32::from(p.0[2]) * 0.5) as u8;
            }
        }
        img
    };
    for (i, img) in [&base, &overlay(pred), &overlay(gt)].iter().enumerate() {
        let x0 = i as u32 * (hw + PAD);
        for y in 0..hh {
            for x in 0..hw {
                canvas.put_pixel(x0 + x, y, *img.get_pixel(x, y));
            }
        }
    }
    canvas.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

const CURVE_COLORS: [[u8; 3]; 6] = [
    [66, 133, 244],
    [219, 68, 55],
    [15, 157, 88],
    [244, 180, 0],
    [171, 71, 188],
    [0, 172, 193],
];

/// Minimal line chart: one polyline per named series over a shared x axis.
pub fn loss_curve_png(path: &Path, series: &[(String, Vec<f64>)]) -> Result<()> {
    let (w, h) = (720u32, 420u32);
    let (ml, mr, mt, mb) = (50u32, 10u32, 10u32, 30u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if finite.is_empty() {
        return img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);

    let plot_w = (w - ml - mr) as f64;
    let plot_h = (h - mt - mb) as f64;
    let xy = |i: usize, v: f64| -> (i64, i64) {
        let x = ml as f64 + i as f64 / (n - 1) as f64 * plot_w;
        let y = mt as f64 + (1.0 - (v - lo) / (hi - lo)) * plot_h;
        (x as i64, y as i64)
    };

    // Axes.
    for x in ml..w - mr {
        img.put_pixel(x, h - mb, Rgb([0, 0, 0]));
    }
    for y in mt..h - mb {
        img.put_pixel(ml, y, Rgb([0, 0, 0]));
    }

    fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
        let (w, h) = img.dimensions();
        let steps = (a.0 - b.0).abs().max((a.1 - b.1).abs()).max(1);
        for s in 0..=steps {
            let x = a.0 + (b.0 - a.0) * s / steps;
            let y = a.1 + (b.1 - a.1) * s / steps;
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }

    for (si, (_, vals)) in series.iter().enumerate() {
        let color = CURVE_COLORS[si % CURVE_COLORS.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in vals.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = xy(i, v);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, color);
            }
            prev = Some(p);
        }
        // Legend swatch.
        for dx in 0..18u32 {
            for dy in 0..4u32 {
                let x = ml + 8 + dx;
                let y = mt + 8 + si as u32 * 10 + dy;
                if x < w && y < h {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

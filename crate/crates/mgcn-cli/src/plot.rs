//! Minimal PNG rendering: matrix heatmaps and x/y line plots, written
//! atomically. Input CSVs are sniffed: a two-column file with a recognized
//! curve header plots as a line chart, anything numeric plots as a heatmap.

use anyhow::{bail, Context, Result};
use image::{ImageBuffer, Rgb, RgbImage};
use std::path::Path;

fn viridis(t: f64) -> Rgb<u8> {
    // coarse 6-stop approximation of the viridis colormap
    const STOPS: [(f64, [f64; 3]); 6] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.2, [59.0, 82.0, 139.0]),
        (0.4, [33.0, 145.0, 140.0]),
        (0.6, [94.0, 201.0, 98.0]),
        (0.8, [253.0, 231.0, 37.0]),
        (1.0, [255.0, 255.0, 224.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let mut lo = STOPS[0];
    let mut hi = STOPS[STOPS.len() - 1];
    for w in STOPS.windows(2) {
        if t >= w[0].0 && t <= w[1].0 {
            lo = w[0];
            hi = w[1];
            break;
        }
    }
    let f = if hi.0 > lo.0 { (t - lo.0) / (hi.0 - lo.0) } else { 0.0 };
    let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    Rgb([
        mix(lo.1[0], hi.1[0]),
        mix(lo.1[1], hi.1[1]),
        mix(lo.1[2], hi.1[2]),
    ])
}

fn save_png(img: &RgbImage, out: &Path) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .context("encode png")?;
    mgcn_core::data::atomic_write(out, &bytes).map_err(anyhow::Error::from)
}

pub fn heatmap(values: &[Vec<f64>], out: &Path) -> Result<()> {
    let rows = values.len();
    let cols = values.first().map(|r| r.len()).unwrap_or(0);
    if rows == 0 || cols == 0 {
        bail!("empty matrix, nothing to plot");
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in values {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (512 / rows.max(cols)).clamp(1, 24) as u32;
    let mut img = ImageBuffer::new(cols as u32 * cell, rows as u32 * cell);
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let px = viridis((v - lo) / span);
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(c as u32 * cell + dx, r as u32 * cell + dy, px);
                }
            }
        }
    }
    save_png(&img, out)
}

pub fn line_plot(xs: &[f64], ys: &[f64], log_x: bool, out: &Path) -> Result<()> {
    if xs.len() != ys.len() || xs.is_empty() {
        bail!("need equal, non-empty x/y series");
    }
    let (w, h, margin) = (640u32, 400u32, 40i64);
    let mut img = ImageBuffer::from_pixel(w, h, Rgb([255u8, 255, 255]));
    let tx: Vec<f64> = xs
        .iter()
        .map(|&x| if log_x { x.max(1e-12).log10() } else { x })
        .collect();
    let (x0, x1) = bounds(&tx);
    let (y0, y1) = bounds(ys);
    let sx = |x: f64| -> i64 {
        margin + ((x - x0) / (x1 - x0).max(1e-12) * (w as f64 - 2.0 * margin as f64)) as i64
    };
    let sy = |y: f64| -> i64 {
        (h as i64 - margin)
            - ((y - y0) / (y1 - y0).max(1e-12) * (h as f64 - 2.0 * margin as f64)) as i64
    };
    let axis = Rgb([120u8, 120, 120]);
    for x in margin..(w as i64 - margin) {
        put(&mut img, x, h as i64 - margin, axis);
    }
    for y in margin..(h as i64 - margin) {
        put(&mut img, margin, y, axis);
    }
    let pen = Rgb([28u8, 90, 170]);
    for i in 1..tx.len() {
        draw_segment(&mut img, sx(tx[i - 1]), sy(ys[i - 1]), sx(tx[i]), sy(ys[i]), pen);
    }
    for i in 0..tx.len() {
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                put(&mut img, sx(tx[i]) + dx, sy(ys[i]) + dy, pen);
            }
        }
    }
    save_png(&img, out)
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

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_segment(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + ((x1 - x0) as f64 * t).round() as i64;
        let y = y0 + ((y1 - y0) as f64 * t).round() as i64;
        put(img, x, y, c);
    }
}

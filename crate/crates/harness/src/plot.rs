//! Height and error maps as PNG files with a labelled colour bar.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Black at the low end, yellow at the high end.
pub fn height_color(t: f64) -> [u8; 3] {
    let v = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    [v, v, 0]
}

/// Blue at the low end, red at the high end.
pub fn error_color(t: f64) -> [u8; 3] {
    let v = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    [v, 0, 255 - v]
}

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        '-' => [0, 0, 0b111, 0, 0],
        'm' => [0, 0, 0b110, 0b111, 0b101],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, scale: u32) {
    for (k, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        let gx = x0 + k as u32 * (GLYPH_W + 1) * scale;
        for (row, bits) in g.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (x, y) = (gx + col * scale + dx, y0 + row as u32 * scale + dy);
                            if x < img.width() && y < img.height() {
                                img.put_pixel(x, y, Rgb([0, 0, 0]));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Renders `values` with `color`, the colour range pinned to the finite
/// min/max. A flat field renders at the low end. NaN cells are grey. A right
/// margin holds the colour bar and the two endpoint values.
pub fn render(values: &Array2<f64>, color: fn(f64) -> [u8; 3]) -> RgbImage {
    let (h, w) = values.dim();
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let t = |v: f64| if span > 0.0 { (v - lo) / span } else { 0.0 };

    let f = (256 / h.max(w).max(1)).max(1) as u32;
    let (pw, ph) = (w as u32 * f, (h as u32 * f).max(2 * (GLYPH_H * 2) + 8));
    let margin = 80u32;
    let mut img = RgbImage::from_pixel(pw + margin, ph, Rgb([255, 255, 255]));
    for ((r, c), &v) in values.indexed_iter() {
        let px = if v.is_finite() { color(t(v)) } else { [128, 128, 128] };
        for dy in 0..f {
            for dx in 0..f {
                img.put_pixel(c as u32 * f + dx, r as u32 * f + dy, Rgb(px));
            }
        }
    }
    let bar_x = pw + 6;
    let bar_h = (h as u32 * f).max(1);
    for y in 0..bar_h {
        let tt = 1.0 - y as f64 / (bar_h.max(2) - 1) as f64;
        for x in bar_x..bar_x + 10 {
            img.put_pixel(x, y, Rgb(color(tt)));
        }
    }
    draw_text(&mut img, bar_x + 14, 0, &format!("{hi:.2}m"), 2);
    draw_text(&mut img, bar_x + 14, ph - GLYPH_H * 2, &format!("{lo:.2}m"), 2);
    img
}

/// Writes `<stem>_height.png` and `<stem>_error.png` into `dir`.
pub fn plot_run(dir: &Path, stem: &str, pred: &Array2<f64>, gt: &Array2<f64>) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let err = ndarray::Zip::from(pred).and(gt).map_collect(|p, g| (p - g).abs());
    let hp = dir.join(format!("{stem}_height.png"));
    let ep = dir.join(format!("{stem}_error.png"));
    render(pred, height_color).save(&hp)?;
    render(&err, error_color).save(&ep)?;
    Ok(vec![hp, ep])
}

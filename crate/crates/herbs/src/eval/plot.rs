use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{HerbsError, Result};

const W: u32 = 520;
const H: u32 = 340;
const LEFT: i64 = 56;
const RIGHT: i64 = 20;
const TOP: i64 = 20;
const BOTTOM: i64 = 40;

// 3x5 glyphs, one row per nibble, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64) {
    const SCALE: i64 = 2;
    let mut cx = x;
    for ch in s.chars() {
        if let Some(g) = glyph(ch) {
            for (r, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        for dy in 0..SCALE {
                            for dx in 0..SCALE {
                                put(img, cx + col * SCALE + dx, y + r as i64 * SCALE + dy, Rgb([0, 0, 0]));
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * SCALE;
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(
            img,
            (x0 as f64 + t * (x1 - x0) as f64).round() as i64,
            (y0 as f64 + t * (y1 - y0) as f64).round() as i64,
            c,
        );
    }
}

fn label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Line plot of `(x, y)` points with numeric tick labels, saved as PNG.
/// With `log_x` the x axis is log2-spaced.
pub fn plot_series(points: &[(f64, f64)], log_x: bool, path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(HerbsError::Empty("plot with no points".into()));
    }
    if log_x && points.iter().any(|p| p.0 <= 0.0) {
        return Err(HerbsError::InvalidConfig("log axis needs positive x values".into()));
    }
    let fx = |x: f64| if log_x { x.log2() } else { x };
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (fx(x), y)).unzip();
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let ((x0, x1), (y0, y1)) = (span(&xs), span(&ys));
    let (pw, ph) = (W as i64 - LEFT - RIGHT, H as i64 - TOP - BOTTOM);
    let px = |x: f64| LEFT + ((x - x0) / (x1 - x0) * pw as f64).round() as i64;
    let py = |y: f64| TOP + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;

    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        line(&mut img, (LEFT, py(y)), (LEFT + pw, py(y)), grid);
        text(&mut img, &label(y), 4, py(y) - 5);
    }
    for (&(raw, _), &x) in points.iter().zip(&xs) {
        line(&mut img, (px(x), TOP), (px(x), TOP + ph), grid);
        let l = label(raw);
        text(&mut img, &l, px(x) - 4 * l.len() as i64, TOP + ph + 10);
    }
    let black = Rgb([0, 0, 0]);
    line(&mut img, (LEFT, TOP + ph), (LEFT + pw, TOP + ph), black);
    line(&mut img, (LEFT, TOP), (LEFT, TOP + ph), black);
    let blue = Rgb([30, 80, 200]);
    for w in xs.iter().zip(&ys).collect::<Vec<_>>().windows(2) {
        line(&mut img, (px(*w[0].0), py(*w[0].1)), (px(*w[1].0), py(*w[1].1)), blue);
    }
    for (&x, &y) in xs.iter().zip(&ys) {
        for d in -2..=2 {
            for e in -2..=2 {
                put(&mut img, px(x) + d, py(y) + e, Rgb([200, 40, 40]));
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

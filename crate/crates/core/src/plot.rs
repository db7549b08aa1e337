//! Static PNG figures: loss curves, sample grids and weight-map heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

// 3x5 glyphs, one row per 3 bits, top row first.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c.to_ascii_lowercase() {
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
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [7, 4, 4, 4, 7],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [7, 4, 5, 5, 7],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 7],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [7, 4, 7, 1, 7],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '=' => [0, 7, 0, 7, 0],
        ' ' => [0; 5],
        _ => return None,
    })
}

/// Draws `text` with its top-left corner at `(x, y)`, each font pixel `scale` wide.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c).or_else(|| glyph('_')) else { continue };
        let ox = x + i as i64 * 4 * scale;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..3 {
                if bits & (4 >> rx) != 0 {
                    fill_rect(img, ox + rx * scale, y + ry as i64 * scale, scale, scale, color);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            put(img, xx, yy, color);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
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

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// A named series of `(step, value)` points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line plot of every series on shared axes (EMA-smoothed, log-scaled y),
/// with a legend in the top-right corner.
pub fn loss_curves(series: &[Series], title: &str, path: &Path) -> Result<()> {
    let (w, h) = (720i64, 420i64);
    let (left, right, top, bottom) = (60i64, 20i64, 30i64, 40i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let grey = Rgb([200, 200, 200]);
    let smoothed: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            let ys: Vec<f64> = s.points.iter().map(|p| p.1.max(1e-12).ln()).collect();
            s.points.iter().map(|p| p.0).zip(ema(&ys, 0.05)).collect()
        })
        .collect();
    let all = smoothed.iter().flatten();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        if y.is_finite() {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if x_lo > x_hi {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi - x_lo < 1e-12 {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-12 {
        y_hi = y_lo + 1.0;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let px = |x: f64| left + ((x - x_lo) / (x_hi - x_lo) * pw as f64).round() as i64;
    let py = |y: f64| top + ph - ((y - y_lo) / (y_hi - y_lo) * ph as f64).round() as i64;
    for k in 1..4 {
        let yy = top + ph * k / 4;
        line(&mut img, (left, yy), (left + pw, yy), grey);
    }
    line(&mut img, (left, top), (left, top + ph), black);
    line(&mut img, (left, top + ph), (left + pw, top + ph), black);
    draw_text(&mut img, left, 8, title, 3, black);
    draw_text(&mut img, left, top + ph + 8, &format!("{x_lo:.0}"), 2, black);
    let xr = format!("{x_hi:.0}");
    draw_text(&mut img, left + pw - 8 * xr.len() as i64, top + ph + 8, &xr, 2, black);
    draw_text(&mut img, 4, top, &format!("{:.3}", y_hi.exp()), 2, black);
    draw_text(&mut img, 4, top + ph - 10, &format!("{:.3}", y_lo.exp()), 2, black);
    for (i, pts) in smoothed.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for pair in pts.windows(2) {
            if pair[0].1.is_finite() && pair[1].1.is_finite() {
                line(&mut img, (px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), color);
            }
        }
        let ly = top + 6 + i as i64 * 14;
        let lx = left + pw - 200;
        fill_rect(&mut img, lx, ly, 16, 8, color);
        draw_text(&mut img, lx + 22, ly - 1, &series[i].label, 2, black);
    }
    save(&img, path)
}

fn gray(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Tiles `C x H x W` images in `[-1, 1]` into a grid, `scale`x enlarged.
pub fn image_grid(images: &[Vec<f32>], channels: usize, res: usize, cols: usize, scale: usize, path: &Path) -> Result<()> {
    if images.is_empty() || cols == 0 {
        return Err(Error::invalid("image_grid", "needs at least one image and column"));
    }
    let rows = images.len().div_ceil(cols);
    let cell = res * scale + 2;
    let mut img = RgbImage::from_pixel((cols * cell) as u32, (rows * cell) as u32, Rgb([255, 255, 255]));
    let n = res * res;
    for (k, im) in images.iter().enumerate() {
        if im.len() != channels * n {
            return Err(Error::Shape {
                context: "image_grid tile",
                expected: vec![channels * n],
                actual: vec![im.len()],
            });
        }
        let (ox, oy) = ((k % cols) * cell + 1, (k / cols) * cell + 1);
        for y in 0..res * scale {
            for x in 0..res * scale {
                let i = (y / scale) * res + x / scale;
                let px = if channels >= 3 {
                    Rgb([gray(im[i]), gray(im[n + i]), gray(im[2 * n + i])])
                } else {
                    let g = gray(im[i]);
                    Rgb([g, g, g])
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, px);
            }
        }
    }
    save(&img, path)
}

/// Blue-to-yellow heatmap of `values` (row-major `h x w`), `scale`x enlarged.
pub fn heatmap(values: &[f64], h: usize, w: usize, scale: usize, path: &Path) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape {
            context: "heatmap values",
            expected: vec![h * w],
            actual: vec![values.len()],
        });
    }
    let lo = values.iter().copied().fold(f64::MAX, f64::min);
    let hi = values.iter().copied().fold(f64::MIN, f64::max);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let stops = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let color = |v: f64| {
        let t = ((v - lo) / span).clamp(0.0, 1.0) * 2.0;
        let (a, b, f) = if t < 1.0 { (stops[0], stops[1], t) } else { (stops[1], stops[2], t - 1.0) };
        Rgb([0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8))
    };
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for (y, x, px) in img.enumerate_pixels_mut() {
        *px = color(values[(y as usize / scale) * w + x as usize / scale]);
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = Series {
            label: "distilled".into(),
            points: (0..100).map(|i| (i as f64, 1.0 / (1.0 + i as f64))).collect(),
        };
        loss_curves(&[s], "l_s", &dir.path().join("c.png")).unwrap();
        image_grid(&[vec![0.0; 16], vec![1.0; 16]], 1, 4, 2, 2, &dir.path().join("g.png")).unwrap();
        heatmap(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, &dir.path().join("h.png")).unwrap();
        let g = image::open(dir.path().join("g.png")).unwrap();
        assert_eq!((g.width(), g.height()), (20, 10));
        assert!(heatmap(&[0.0], 2, 2, 1, &dir.path().join("x.png")).is_err());
    }
}

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use super::dataset::to_rgb;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEPARATOR: u32 = 2;

/// Images `[C, H, W]` laid out row-major on a `rows x cols` grid with
/// white separators between cells.
pub fn montage(images: &[Tensor<f32>], rows: usize, cols: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::Data("montage of zero images".into()))?;
    if images.len() > rows * cols {
        return Err(Error::Data(format!("{} images do not fit a {rows}x{cols} grid", images.len())));
    }
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::Data(format!("montage images differ in size: {:?} vs {:?}", first.shape(), bad.shape())));
    }
    let s = first.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("montage expects [C,H,W] images, got {s:?}")));
    }
    let (h, w) = (s[1] as u32, s[2] as u32);
    let width = cols as u32 * w + (cols as u32 - 1) * SEPARATOR;
    let height = rows as u32 * h + (rows as u32 - 1) * SEPARATOR;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (k, t) in images.iter().enumerate() {
        let (r, c) = ((k / cols) as u32, (k % cols) as u32);
        let tile = to_rgb(t)?;
        image::imageops::replace(&mut canvas, &tile, (c * (w + SEPARATOR)) as i64, (r * (h + SEPARATOR)) as i64);
    }
    Ok(canvas)
}

/// Splits an `[N, C, H, W]` batch into per-image tensors.
pub fn unbatch(batch: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [N,C,H,W], got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    batch.data().chunks(per.max(1)).take(s[0]).map(|c| Tensor::new(&s[1..], c.to_vec())).collect()
}

pub fn save_montage(images: &[Tensor<f32>], rows: usize, cols: usize, path: &Path) -> Result<()> {
    montage(images, rows, cols)?.save(path)?;
    Ok(())
}

/// `step,value` lines with 17 significant digits.
pub fn curve_csv(values: &[f64]) -> String {
    let mut out = String::from("step,value\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{v:.16e}").expect("string write");
    }
    out
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,value") {
        return Err(Error::Data("curve CSV must start with a step,value header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (_, v) = l.split_once(',').ok_or_else(|| Error::Data(format!("bad curve line {l:?}")))?;
            v.trim().parse::<f64>().map_err(|e| Error::Data(format!("bad curve value {v:?}: {e}")))
        })
        .collect()
}

/// Writes `<path>` as CSV and a line plot next to it with extension `png`.
pub fn save_curve(values: &[f64], path: &Path) -> Result<()> {
    std::fs::write(path, curve_csv(values))?;
    line_plot(values, 480, 270).save(path.with_extension("png"))?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<f64>> {
    parse_curve_csv(&std::fs::read_to_string(path)?)
}

/// Minimal line chart: frame, zero line when in range, polyline with dots.
pub fn line_plot(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let frame = Rgb([160, 160, 160]);
    draw_line(&mut img, (margin, margin), (margin + w, margin), frame);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), frame);
    draw_line(&mut img, (margin, margin), (margin, margin + h), frame);
    draw_line(&mut img, (margin + w, margin), (margin + w, margin + h), frame);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_px = |i: usize, v: f64| {
        let x = if values.len() > 1 { margin + (i as i64 * w) / (values.len() as i64 - 1) } else { margin + w / 2 };
        let y = margin + h - (((v - lo) / span) * h as f64).round() as i64;
        (x, y)
    };
    if lo < 0.0 && hi > 0.0 {
        let (_, y0) = to_px(0, 0.0);
        draw_line(&mut img, (margin, y0), (margin + w, y0), Rgb([220, 220, 220]));
    }
    let ink = Rgb([30, 80, 200]);
    let pts: Vec<(i64, i64)> =
        values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| to_px(i, v)).collect();
    for pair in pts.windows(2) {
        draw_line(&mut img, pair[0], pair[1], ink);
    }
    for &(x, y) in &pts {
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut img, x + dx, y + dy, ink);
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_layout() {
        let imgs: Vec<_> = (0..9).map(|_| Tensor::<f32>::zeros(&[3, 6, 6])).collect();
        let m = montage(&imgs, 1, 9).unwrap();
        assert_eq!(m.width(), 9 * 6 + 8 * 2);
        assert_eq!(m.height(), 6);
        let one = montage(&imgs[..1], 1, 1).unwrap();
        assert_eq!((one.width(), one.height()), (6, 6));
        let mixed = vec![Tensor::<f32>::zeros(&[3, 6, 6]), Tensor::zeros(&[3, 5, 5])];
        assert!(montage(&mixed, 1, 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let v = vec![0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0];
        assert_eq!(parse_curve_csv(&curve_csv(&v)).unwrap(), v);
    }
}

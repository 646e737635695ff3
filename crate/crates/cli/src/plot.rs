use std::path::Path;

use anyhow::{Context, Result};
use bmdg::synthdata::Dataset;
use image::{Rgb, RgbImage};

const SIZE: u32 = 480;
const MARGIN: f64 = 24.0;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);

fn identity_color(label: u32) -> Rgb<u8> {
    let hue = (label as f64 * 0.618_033_988_75).fract();
    let sector = hue * 6.0;
    let f = sector.fract();
    let (r, g, b) = match sector as u32 {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let c = |x: f64| (40.0 + 180.0 * x) as u8;
    Rgb([c(r), c(g), c(b)])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=n {
        let a = s as f64 / n as f64;
        put(img, (x0 + a * (x1 - x0)).round() as i64, (y0 + a * (y1 - y0)).round() as i64, c);
    }
}

/// Maps data ranges onto the canvas, y pointing up.
struct Frame {
    lo: (f64, f64),
    span: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)> + Clone) -> Frame {
        let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            xl = xl.min(x);
            xh = xh.max(x);
            yl = yl.min(y);
            yh = yh.max(y);
        }
        if !xl.is_finite() {
            (xl, xh, yl, yh) = (0.0, 1.0, 0.0, 1.0);
        }
        let span = |l: f64, h: f64| if h - l > 1e-12 { h - l } else { 1.0 };
        Frame {
            lo: (xl, yl),
            span: (span(xl, xh), span(yl, yh)),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let w = SIZE as f64 - 2.0 * MARGIN;
        (
            MARGIN + (x - self.lo.0) / self.span.0 * w,
            SIZE as f64 - MARGIN - (y - self.lo.1) / self.span.1 * w,
        )
    }
}

fn axes(img: &mut RgbImage) {
    let (lo, hi) = (MARGIN - 4.0, SIZE as f64 - MARGIN + 4.0);
    line(img, (lo, hi), (hi, hi), AXIS);
    line(img, (lo, lo), (lo, hi), AXIS);
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Two-dimensional embedding scatter: filled squares are visible images,
/// hollow squares infrared, colored by identity.
pub fn scatter(rows: &[(u32, bool, f64, f64)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, WHITE);
    axes(&mut img);
    let frame = Frame::fit(rows.iter().map(|r| (r.2, r.3)));
    for &(label, visible, x, y) in rows {
        let (px, py) = frame.map(x, y);
        let c = identity_color(label);
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if visible || dx.abs() == 3 || dy.abs() == 3 {
                    put(&mut img, px as i64 + dx, py as i64 + dy, c);
                }
            }
        }
    }
    save(&img, path)
}

/// Polyline of `(x, y)` points.
pub fn curve(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, WHITE);
    axes(&mut img);
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let frame = Frame::fit(pts.iter().copied().chain(std::iter::once((pts.first().map_or(0.0, |p| p.0), 0.0))));
    let color = Rgb([200, 40, 40]);
    for w in pts.windows(2) {
        line(&mut img, frame.map(w[0].0, w[0].1), frame.map(w[1].0, w[1].1), color);
    }
    for &(x, y) in &pts {
        let (px, py) = frame.map(x, y);
        for d in -2i64..=2 {
            put(&mut img, px as i64 + d, py as i64, color);
            put(&mut img, px as i64, py as i64 + d, color);
        }
    }
    save(&img, path)
}

/// One row per image: the image itself followed by each prototype mask as a
/// heat map, upsampled to image resolution.
pub fn mask_grid(
    dataset: &Dataset,
    picks: &[usize],
    h: usize,
    w: usize,
    num_prototypes: usize,
    values: &[Vec<f64>],
    path: &Path,
) -> Result<()> {
    let (ih, iw) = (dataset.height, dataset.width);
    let cols = num_prototypes + 1;
    let gap = 2;
    let width = (cols * (iw + gap)) as u32;
    let height = (picks.len() * (ih + gap)).max(1) as u32;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    for (row, (&index, mask)) in picks.iter().zip(values).enumerate() {
        let oy = row * (ih + gap);
        let pixels = &dataset.pixels[index];
        for y in 0..ih {
            for x in 0..iw {
                let o = (y * iw + x) * 3;
                img.put_pixel(x as u32, (oy + y) as u32, Rgb([pixels[o], pixels[o + 1], pixels[o + 2]]));
            }
        }
        for k in 0..num_prototypes {
            let ox = (k + 1) * (iw + gap);
            for y in 0..ih {
                for x in 0..iw {
                    let cell = (y * h / ih) * w + x * w / iw;
                    let v = mask.get(cell * num_prototypes + k).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                    let c = Rgb([(255.0 * v) as u8, (80.0 * v) as u8, (255.0 * (1.0 - v)) as u8]);
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, c);
                }
            }
        }
    }
    save(&img, path)
}

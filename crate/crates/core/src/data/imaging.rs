//! Pixel-level helpers: bilinear resampling, PNG/PPM IO and heat-map overlays.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resampling of one `h×w` plane with half-pixel centres and edge
/// clamping. A constant plane stays exactly constant.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

/// Crops the central square of a `C×H×W` image and resizes it to
/// `C×target×target`.
pub fn crop_and_resize(image: &Tensor, target: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid(format!("expected a C×H×W image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let side = h.min(w);
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    let mut data = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let crop: Vec<f64> = (0..side)
            .flat_map(|y| plane[(top + y) * w + left..(top + y) * w + left + side].iter().copied())
            .collect();
        data.extend(resize_bilinear(&crop, side, side, target, target));
    }
    Tensor::new(vec![c, target, target], data)
}

/// Decodes a PNG or PPM file into `3×H×W` values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = (px.0[c] as f64).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Loads an image, centre-crops it to a square and resizes to
/// `3×target×target`.
pub fn load_and_resize(path: &Path, target: usize) -> Result<Tensor> {
    crop_and_resize(&load_rgb(path)?, target)
}

fn to_rgb_image(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 3 && s[0] != 1) {
        return Err(Error::invalid(format!("expected a 3×H×W or 1×H×W image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let ch = ch.min(c - 1);
            (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb_image(image)?
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    to_rgb_image(image)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Blends a min-max normalised heat map (one `H×W` plane) over an RGB image.
pub fn overlay_heatmap(image: &Tensor, map: &[f64]) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || map.len() != s[1] * s[2] {
        return Err(Error::invalid(format!(
            "heat map of {} cells does not match image {s:?}",
            map.len()
        )));
    }
    let hw = s[1] * s[2];
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = image.clone();
    for (i, &v) in map.iter().enumerate() {
        let col = jet((v - lo) / span);
        for c in 0..3 {
            let px = &mut out.data_mut()[c * hw + i];
            *px = 0.5 * *px + 0.5 * col[c];
        }
    }
    Ok(out)
}

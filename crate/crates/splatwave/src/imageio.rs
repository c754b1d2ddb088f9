//! PNG and raw float image files.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use splatwave_core::Image;

use crate::error::{file_err, IoError, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB, values clamped to `[0, 1]`.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let p = img.pixel(x as usize, y as usize);
        *px = Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]);
    }
    out.save(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })
}

/// Single-channel map as an 8-bit grayscale PNG, scaled so its maximum is
/// white and enlarged `zoom` times with nearest-neighbor sampling.
pub fn write_gray_png(path: &Path, values: &[f64], width: usize, height: usize, zoom: usize) -> Result<()> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let zoom = zoom.max(1);
    let out = image::GrayImage::from_fn((width * zoom) as u32, (height * zoom) as u32, |x, y| {
        image::Luma([to_u8(values[(y as usize / zoom) * width + x as usize / zoom] * scale)])
    });
    out.save(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let data = img.pixels().flat_map(|p| p.0.map(|c| f64::from(c) / 255.0)).collect();
    Ok(Image::from_vec(img.width() as usize, img.height() as usize, data)?)
}

/// Little-endian `f32`, row-major `H × W × 3` with no header.
pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(file_err(path))
}

use std::path::Path;

use image::{ExtendedColorType, GrayImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an image as a `3×H×W` tensor in `[0, 1]`; grayscale is replicated.
pub fn read_frame(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] as f32 / 255.0
    }))
}

/// Saves a `1×H×W` or `3×H×W` tensor in `[0, 1]` as 8-bit PNG.
pub fn write_frame(path: impl AsRef<Path>, frame: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = match *frame.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("frame must be 1×H×W or 3×H×W, got {s:?}"))),
    };
    let d = frame.data();
    let bytes: Vec<u8> = (0..h * w).flat_map(|p| (0..c).map(move |ch| to_byte(d[ch * h * w + p]))).collect();
    let kind = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    image::save_buffer(path, &bytes, w as u32, h as u32, kind).map_err(|e| image_err(path, e))
}

/// Saves a row-major boolean mask as a black/white PNG.
pub fn write_mask(path: impl AsRef<Path>, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let path = path.as_ref();
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask has {} pixels, expected {h}×{w}", mask.len())));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, ExtendedColorType::L8).map_err(|e| image_err(path, e))
}

/// Reads a mask written by [`write_mask`]: any nonzero pixel is set.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(Vec<bool>, usize, usize)> {
    let path = path.as_ref();
    let img: GrayImage = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.as_raw().iter().map(|&b| b != 0).collect(), h, w))
}

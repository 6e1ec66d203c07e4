use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

// Segment lengths of the Middlebury color wheel: red→yellow→green→cyan→
// blue→magenta→red.
const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn wheel() -> Vec<[f64; 3]> {
    let mut cols = Vec::with_capacity(SEGMENTS.iter().sum());
    // (fixed channel at 255, ramped channel, ramp direction up?)
    let ramps = [(0, 1, true), (1, 0, false), (1, 2, true), (2, 1, false), (2, 0, true), (0, 2, false)];
    for (&n, &(fixed, ramped, up)) in SEGMENTS.iter().zip(&ramps) {
        for i in 0..n {
            let mut c = [0.0; 3];
            c[fixed] = 255.0;
            let t = (255 * i / n) as f64;
            c[ramped] = if up { t } else { 255.0 - t };
            cols.push(c);
        }
    }
    cols
}

/// Continuous wheel position of a flow vector, in `[0, 360)` degrees.
/// Opposite directions are 180° apart.
pub fn wheel_hue_degrees(u: f64, v: f64) -> f64 {
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let deg = (a + 1.0) * 180.0;
    if deg >= 360.0 {
        deg - 360.0
    } else {
        deg
    }
}

/// Color-wheel rendering: hue from direction, saturation from magnitude
/// relative to `max_magnitude` (clamped to 1). Zero flow is white. Without
/// an explicit maximum, the 99th-percentile magnitude of the field is used.
pub fn colorize_flow(flow: &Tensor<f32>, max_magnitude: Option<f32>) -> Result<RgbImage> {
    let [2, h, w] = *flow.shape() else {
        return Err(Error::Shape(format!("flow must be 2×H×W, got {:?}", flow.shape())));
    };
    let (u, v) = flow.data().split_at(h * w);
    let mags: Vec<f64> = u.iter().zip(v).map(|(&a, &b)| (a as f64).hypot(b as f64)).collect();
    let max = match max_magnitude {
        Some(m) => m as f64,
        None => percentile(&mags, 0.99),
    };
    let cols = wheel();
    let n = cols.len() as f64;
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        let rad = if max > 0.0 && max.is_finite() { (mags[i] / max).min(1.0) } else { 0.0 };
        if rad == 0.0 {
            data.extend_from_slice(&[255, 255, 255]);
            continue;
        }
        let pos = wheel_hue_degrees(u[i] as f64, v[i] as f64) / 360.0 * n;
        let k0 = pos.floor() as usize % cols.len();
        let k1 = (k0 + 1) % cols.len();
        let f = pos - pos.floor();
        for (a, b) in cols[k0].iter().zip(&cols[k1]) {
            let col = ((1.0 - f) * a + f * b) / 255.0;
            let col = 1.0 - rad * (1.0 - col);
            data.push((255.0 * col).round() as u8);
        }
    }
    Ok(RgbImage { width: w, height: h, data })
}

fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[((sorted.len() - 1) as f64 * q).floor() as usize]
}

/// Binary PPM (`P6`).
pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

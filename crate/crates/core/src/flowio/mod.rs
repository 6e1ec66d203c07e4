//! Flow files, frame images, flow colorization and evaluation metrics.
//!
//! Flows are `2×H×W` tensors with channels `(u, v)` in pixels.

mod color;
mod image_io;
mod metrics;

use std::fs;
use std::path::Path;

pub use color::{colorize_flow, wheel_hue_degrees, write_png, write_ppm, RgbImage};
pub use image_io::{read_frame, read_mask, write_frame, write_mask};
pub use metrics::{aepe, band_metrics, fl_all, MetricsAccumulator, MetricsReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `"PIEH"`, the little-endian bytes of the float 202021.25.
pub const FLO_MAGIC: f32 = 202021.25;
const HEADER_BYTES: usize = 12;

fn flow_dims(flow: &Tensor<f32>) -> Result<(usize, usize)> {
    match *flow.shape() {
        [2, h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(Error::Shape(format!("flow must be 2×H×W with H, W > 0, got {s:?}"))),
    }
}

/// Serializes a flow field into `.flo` bytes.
pub fn encode_flo(flow: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = flow_dims(flow)?;
    if !flow.all_finite() {
        return Err(Error::NonFinite("flow contains NaN or infinity".into()));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = flow.data().split_at(h * w);
    for (a, b) in u.iter().zip(v) {
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
    }
    Ok(out)
}

/// Parses `.flo` bytes.
pub fn decode_flo(bytes: &[u8]) -> Result<Tensor<f32>> {
    let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().expect("4-byte slice") };
    if bytes.len() < HEADER_BYTES {
        return Err(Error::FlowFormat(format!("{} bytes is shorter than the 12-byte header", bytes.len())));
    }
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::FlowFormat(format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(Error::FlowFormat(format!("nonpositive dimensions {w}×{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let want = HEADER_BYTES + 8 * w * h;
    if bytes.len() < want {
        return Err(Error::FlowFormat(format!("truncated payload: {} bytes, expected {want}", bytes.len())));
    }
    let mut data = vec![0f32; 2 * h * w];
    for i in 0..h * w {
        data[i] = f32::from_le_bytes(word(3 + 2 * i));
        data[h * w + i] = f32::from_le_bytes(word(4 + 2 * i));
    }
    Tensor::new([2, h, w], data)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_flo(flow)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| match e {
        Error::FlowFormat(m) => Error::FlowFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

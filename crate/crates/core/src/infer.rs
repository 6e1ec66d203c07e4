//! Inference on frame sequences: single clips and `T+2`-frame windows.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::VideoFlowNet;
use crate::mop::videoflow_forward;
use crate::tensor::Tensor;

/// Final-iteration bi-directional flow of one center frame at image
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterFlow {
    /// 0-based frame index.
    pub frame: usize,
    /// `f_{t→t−1}`
    pub prev: Tensor<f32>,
    /// `f_{t→t+1}`
    pub next: Tensor<f32>,
}

/// Runs the model once over a whole clip and returns the final flows of
/// every center frame.
pub fn predict_clip(net: &VideoFlowNet<f32>, frames: &[Tensor<f32>], iters: usize) -> Result<Vec<CenterFlow>> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let vars: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
    let preds = videoflow_forward(&mut g, net, &p, &vars, iters)?;
    Ok(preds
        .iter()
        .enumerate()
        .map(|(u, pred)| {
            let last = pred.image.last().expect("at least one iteration");
            CenterFlow { frame: u + 1, prev: g.value(last.prev).clone(), next: g.value(last.next).clone() }
        })
        .collect())
}

/// A window of consecutive frames and the centers it reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub frames: Range<usize>,
    /// 0-based frame indices whose flows this window emits.
    pub emit: Range<usize>,
}

/// Partitions the centers `1..=F−2` into groups of `units` and gives each
/// group a window of `units + 2` frames. The last window is shifted back
/// to keep its full length; it only emits the centers not yet covered.
/// Shorter sequences get a single window over all frames.
pub fn plan_windows(frame_count: usize, units: usize) -> Result<Vec<Window>> {
    if frame_count < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 frames, got {frame_count}")));
    }
    if units == 0 {
        return Err(Error::InvalidArgument("window must hold at least one center".into()));
    }
    let last_center = frame_count - 2;
    let mut out = Vec::new();
    let mut first = 1;
    while first <= last_center {
        let end = (first + units).min(last_center + 1);
        let start = (first - 1).min(frame_count.saturating_sub(units + 2));
        let stop = (start + units + 2).min(frame_count);
        out.push(Window { frames: start..stop, emit: first..end });
        first = end;
    }
    Ok(out)
}

/// Windowed inference over an arbitrarily long sequence.
pub fn predict_windowed(
    net: &VideoFlowNet<f32>,
    frames: &[Tensor<f32>],
    units: usize,
    iters: usize,
) -> Result<Vec<CenterFlow>> {
    let mut out = Vec::with_capacity(frames.len().saturating_sub(2));
    for win in plan_windows(frames.len(), units)? {
        let flows = predict_clip(net, &frames[win.frames.clone()], iters)?;
        for mut cf in flows {
            cf.frame += win.frames.start;
            if win.emit.contains(&cf.frame) {
                out.push(cf);
            }
        }
    }
    Ok(out)
}

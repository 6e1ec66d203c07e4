//! Motion propagation across overlapping tri-frame units.
//!
//! A clip of `F` frames is split into `T = F − 2` overlapping triplets, one
//! unit per center frame. Each unit keeps a motion state `M_t^k`. At every
//! iteration the neighbouring units' states are warped onto the center
//! frame along the unit's own current flows and fed into its motion
//! encoder, so information from frame `t ± j` reaches unit `t` after `j`
//! iterations.
//!
//! Updates are synchronous: every unit reads the states of iteration `k`
//! and all units commit iteration `k + 1` together, so results do not
//! depend on the order units are visited.

use crate::corrvol::{self, DualCorrelationVolume};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::VideoFlowNet;
use crate::nn::{Activation, Bound, Conv, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::trof::{self, Directions, FlowPair, Prediction, Shared, UnitState};

/// Motion encoder with propagated motion states: a shared trunk over
/// `concat(F_corr, F_flow, M_t, m_fwd, m_bwd)` and two sibling heads
/// producing `F_m` and `M_t^{k+1}`.
#[derive(Clone, Debug)]
pub struct MopEncoder {
    pub trunk: Conv,
    pub head_motion: Conv,
    pub head_state: Conv,
    /// `M^0`, learned, `D_m×1×1`.
    pub initial_state: ParamId,
    pub motion_dim: usize,
}

impl MopEncoder {
    pub(crate) fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        fused_dim: usize,
        motion_dim: usize,
    ) -> Self {
        let g2 = 2f64.sqrt();
        let trunk = Conv::new(store, init, "mop.trunk", fused_dim + 3 * motion_dim, motion_dim, 3, Activation::Relu, g2);
        let head_motion = Conv::new(store, init, "mop.head_motion", motion_dim, motion_dim, 3, Activation::Relu, g2);
        let head_state = Conv::new(store, init, "mop.head_state", motion_dim, motion_dim, 3, Activation::Tanh, 1.0);
        let initial_state = store.add("mop.initial_state", init.uniform(&[motion_dim, 1, 1], 0.5));
        MopEncoder { trunk, head_motion, head_state, initial_state, motion_dim }
    }
}

/// `M_t^k` of the unit centered on frame `center_index`.
#[derive(Clone, Copy, Debug)]
pub struct MotionState {
    pub state: Var,
    pub center_index: usize,
    pub iteration: usize,
}

/// Triplet layout of a clip: one unit per frame that has both neighbours.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipLayout {
    pub frame_count: usize,
    /// 0-based center frame indices `1..=F−2`.
    pub center_indices: Vec<usize>,
}

impl ClipLayout {
    pub fn new(frame_count: usize) -> Result<Self> {
        if frame_count < 3 {
            return Err(Error::InvalidArgument(format!("a clip needs at least 3 frames, got {frame_count}")));
        }
        Ok(ClipLayout { frame_count, center_indices: (1..frame_count - 1).collect() })
    }

    /// Number of units, `T = F − 2`.
    pub fn units(&self) -> usize {
        self.center_indices.len()
    }
}

fn pixel_grid<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn([2, h, w], |idx| {
        let (c, rem) = (idx / (h * w), idx % (h * w));
        T::from_f64(if c == 0 { (rem % w) as f64 } else { (rem / w) as f64 })
    })
}

/// Backward warp: `out(x) = state(x + flow(x))`, bilinear with border
/// clamping.
pub fn warp_state<T: Real>(g: &mut Graph<T>, neighbor_state: Var, flow: Var) -> Result<Var> {
    let [_, h, w] = *g.shape(flow) else {
        return Err(Error::Shape(format!("warp flow must be 2×H×W, got {:?}", g.shape(flow))));
    };
    let grid = g.constant(pixel_grid(h, w));
    let coords = g.add(grid, flow)?;
    g.bilinear_sample(neighbor_state, coords)
}

/// Returns `(F_m, M_next)`.
#[allow(clippy::too_many_arguments)]
pub fn motion_encode_mop<T: Real>(
    g: &mut Graph<T>,
    enc: &MopEncoder,
    p: &Bound,
    f_corr: Var,
    f_flow: Var,
    m_self: Var,
    m_fwd: Var,
    m_bwd: Var,
) -> Result<(Var, Var)> {
    for m in [m_self, m_fwd, m_bwd] {
        if g.shape(m).first() != Some(&enc.motion_dim) {
            return Err(Error::Shape(format!(
                "motion state has shape {:?}, expected {} channels",
                g.shape(m),
                enc.motion_dim
            )));
        }
    }
    let x = g.concat_channels(&[f_corr, f_flow, m_self, m_fwd, m_bwd])?;
    let trunk = enc.trunk.forward(g, p, x)?;
    let f_m = enc.head_motion.forward(g, p, trunk)?;
    let m_next = enc.head_state.forward(g, p, trunk)?;
    Ok((f_m, m_next))
}

struct ClipEncoding {
    contexts: Vec<Var>,
    volumes: Vec<DualCorrelationVolume>,
}

/// Runs every unit of the clip for `iters` synchronous iterations in the
/// given direction mode. Returns predictions and final hidden states.
fn refine_clip<T: Real>(
    g: &mut Graph<T>,
    net: &VideoFlowNet<T>,
    p: &Bound,
    shared: &Shared,
    enc: &ClipEncoding,
    iters: usize,
    dirs: Directions,
) -> Result<(Vec<Prediction>, Vec<Var>)> {
    let units = enc.contexts.len();
    let propagate = net.config.ablation.mop;
    let mut states: Vec<UnitState> = enc.contexts.iter().map(|&c| shared.initial_state(c)).collect();
    let mut preds = vec![Prediction::default(); units];
    for _ in 0..iters {
        let mut next_states = Vec::with_capacity(units);
        for u in 0..units {
            let neighbours = match shared.m0 {
                None => None,
                Some(m0) => {
                    let flows = states[u].flows;
                    let m_bwd = match (propagate && u > 0, states.get(u.wrapping_sub(1))) {
                        (true, Some(left)) => warp_state(g, left.motion.expect("motion state"), flows.prev)?,
                        _ => m0,
                    };
                    let m_fwd = match (propagate, states.get(u + 1)) {
                        (true, Some(right)) => warp_state(g, right.motion.expect("motion state"), flows.next)?,
                        _ => m0,
                    };
                    Some((m_fwd, m_bwd))
                }
            };
            let next = trof::refine_step(g, net, p, shared, &enc.volumes[u], enc.contexts[u], &states[u], neighbours, dirs)?;
            next_states.push(next);
        }
        states = next_states;
        for (u, s) in states.iter().enumerate() {
            trof::record(g, shared, &mut preds[u], s.flows)?;
        }
    }
    Ok((preds, states.iter().map(|s| s.hidden).collect()))
}

/// Multi-frame estimation over a clip of `F ≥ 3` frames. Returns one
/// [`Prediction`] per center frame `1..=F−2`, in order.
pub fn videoflow_forward<T: Real>(
    g: &mut Graph<T>,
    net: &VideoFlowNet<T>,
    p: &Bound,
    frames: &[Var],
    iters: usize,
) -> Result<Vec<Prediction>> {
    let layout = ClipLayout::new(frames.len())?;
    if iters == 0 {
        return Err(Error::InvalidArgument("refinement iterations must be ≥ 1".into()));
    }
    let cfg = &net.config;
    let first = g.shape(frames[0]).to_vec();
    for &f in frames {
        trof::check_frame(g, f, cfg.downsample, Some(&first))?;
    }
    let mut feats = Vec::with_capacity(frames.len());
    for &f in frames {
        feats.push(net.trof.feature_encoder.forward(g, p, f)?);
    }
    let mut contexts = Vec::with_capacity(layout.units());
    let mut volumes = Vec::with_capacity(layout.units());
    for &t in &layout.center_indices {
        contexts.push(net.trof.context_encoder.forward(g, p, frames[t])?);
        volumes.push(corrvol::build_dual_corr(g, feats[t], feats[t - 1], feats[t + 1], cfg.corr_levels, cfg.corr_normalize)?);
    }
    let [_, h, w] = *g.shape(feats[0]) else { unreachable!("encoder output is 3-D") };
    let shared = Shared::new(g, net, p, h, w)?;
    let enc = ClipEncoding { contexts, volumes };

    let ab = cfg.ablation;
    if ab.bidirectional && ab.recurrent_fusion {
        return Ok(refine_clip(g, net, p, &shared, &enc, iters, Directions::Both)?.0);
    }
    let (prev_preds, prev_hidden) = refine_clip(g, net, p, &shared, &enc, iters, Directions::PrevOnly)?;
    let (next_preds, next_hidden) = refine_clip(g, net, p, &shared, &enc, iters, Directions::NextOnly)?;
    let mut out = Vec::with_capacity(layout.units());
    for (u, (a, b)) in prev_preds.into_iter().zip(next_preds).enumerate() {
        let mut pred = Prediction::default();
        for k in 0..iters {
            let flows = FlowPair { prev: a.feature[k].prev, next: b.feature[k].next };
            let flows = match (&net.fusion, k + 1 == iters) {
                (Some(fusion), true) => {
                    let both = g.concat_channels(&[prev_hidden[u], next_hidden[u]])?;
                    let delta = fusion.forward(g, p, both)?;
                    let dp = g.slice_channels(delta, 0, 2)?;
                    let dn = g.slice_channels(delta, 2, 2)?;
                    FlowPair { prev: g.add(flows.prev, dp)?, next: g.add(flows.next, dn)? }
                }
                _ => flows,
            };
            trof::record(g, &shared, &mut pred, flows)?;
        }
        out.push(pred);
    }
    Ok(out)
}

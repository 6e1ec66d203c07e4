//! The tri-frame unit: encode a frame triplet, build the dual correlation
//! volume once, then iteratively refine the flows from the center frame to
//! both neighbours.

use crate::corrvol::{self, DualCorrelationVolume};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::VideoFlowNet;
use crate::mop::{self, MopEncoder};
use crate::nn::{Bound, Conv, DepthwiseConv};
use crate::tensor::{Real, Tensor};

/// Bi-directional flow of one center frame: `prev` is `f_{t→t−1}`, `next`
/// is `f_{t→t+1}`, both `2×H×W` with channels `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowPair {
    pub prev: Var,
    pub next: Var,
}

/// Recurrent state of one unit at iteration `k`.
#[derive(Clone, Copy, Debug)]
pub struct TrofState {
    pub hidden: Var,
    pub context: Var,
    pub flows: FlowPair,
    pub iteration: usize,
}

/// Per-iteration predictions of one center frame, at feature and at image
/// resolution.
#[derive(Clone, Debug, Default)]
pub struct Prediction {
    pub feature: Vec<FlowPair>,
    pub image: Vec<FlowPair>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<Conv>,
    /// Instance-normalize the output channels.
    pub normalize: bool,
}

impl Encoder {
    /// Encodes a frame with values in `[0, 1]`, which is first mapped to
    /// `[−1, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let offset = g.constant(Tensor::full(g.shape(x).to_vec(), T::from_f64(-1.0)));
        let x = g.scale(x, T::from_f64(2.0));
        let x = g.add(x, offset)?;
        let y = self.layers.iter().try_fold(x, |x, layer| layer.forward(g, p, x))?;
        if self.normalize {
            g.instance_norm(y, 1e-5)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub enum MotionEncoder {
    /// `F_m = MotionEncoder(F_corr, F_flow)`
    Trof(Conv),
    /// Motion encoder with propagated motion states.
    Mop(MopEncoder),
}

/// Gated convolutional recurrent cell.
#[derive(Clone, Debug)]
pub struct Updater {
    /// Depthwise spatial mixing ahead of pointwise gates, when enabled.
    pub mix: Option<[DepthwiseConv; 2]>,
    pub gates: Conv,
    pub candidate: Conv,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug)]
pub struct TrofParams {
    pub feature_encoder: Encoder,
    pub context_encoder: Encoder,
    pub corr_encoder: [Conv; 2],
    pub flow_encoder: [Conv; 2],
    pub motion: MotionEncoder,
    pub updater: Updater,
    pub flow_head: [Conv; 2],
}

/// Encoded triplet: shared-weight features of all three frames and the
/// context features of the center frame.
#[derive(Clone, Copy, Debug)]
pub struct EncodedTriplet {
    pub feat_prev: Var,
    pub feat_center: Var,
    pub feat_next: Var,
    pub context: Var,
}

pub(crate) fn check_frame<T: Real>(g: &Graph<T>, frame: Var, s: usize, want: Option<&[usize]>) -> Result<()> {
    let shape = g.shape(frame);
    if let Some(w) = want {
        if shape != w {
            return Err(shape_err!("frames differ in shape: {shape:?} vs {w:?}"));
        }
    }
    match *shape {
        [_, h, w] if h % s == 0 && w % s == 0 && h > 0 && w > 0 => Ok(()),
        [_, h, w] => Err(Error::InvalidArgument(format!(
            "frame size {h}×{w} is not divisible by the downsampling factor {s}"
        ))),
        _ => Err(shape_err!("frame must be C×H×W, got {shape:?}")),
    }
}

pub fn encode_features<T: Real>(
    g: &mut Graph<T>,
    net: &VideoFlowNet<T>,
    p: &Bound,
    frames: [Var; 3],
) -> Result<EncodedTriplet> {
    let s = net.config.downsample;
    let first = g.shape(frames[0]).to_vec();
    for &f in &frames {
        check_frame(g, f, s, Some(&first))?;
    }
    let enc = &net.trof.feature_encoder;
    let feat_prev = enc.forward(g, p, frames[0])?;
    let feat_center = enc.forward(g, p, frames[1])?;
    let feat_next = enc.forward(g, p, frames[2])?;
    let context = net.trof.context_encoder.forward(g, p, frames[1])?;
    Ok(EncodedTriplet { feat_prev, feat_center, feat_next, context })
}

/// Correlation and flow features; inputs are concatenated `prev` first.
pub fn corr_flow_encode<T: Real>(
    g: &mut Graph<T>,
    params: &TrofParams,
    p: &Bound,
    c_prev: Var,
    c_next: Var,
    flows: &FlowPair,
) -> Result<(Var, Var)> {
    let corr = g.concat_channels(&[c_prev, c_next])?;
    let corr = params.corr_encoder[0].forward(g, p, corr)?;
    let f_corr = params.corr_encoder[1].forward(g, p, corr)?;
    let flow = g.concat_channels(&[flows.prev, flows.next])?;
    let flow = params.flow_encoder[0].forward(g, p, flow)?;
    let f_flow = params.flow_encoder[1].forward(g, p, flow)?;
    Ok((f_corr, f_flow))
}

pub fn motion_encode_trof<T: Real>(g: &mut Graph<T>, conv: &Conv, p: &Bound, f_corr: Var, f_flow: Var) -> Result<Var> {
    let x = g.concat_channels(&[f_corr, f_flow])?;
    conv.forward(g, p, x)
}

/// One recurrent update: `h' = Updater(F_m, g, h)`, `Δf = FlowHead(h')`.
pub fn update_step<T: Real>(
    g: &mut Graph<T>,
    params: &TrofParams,
    p: &Bound,
    f_m: Var,
    context: Var,
    hidden: Var,
) -> Result<(Var, FlowPair)> {
    let u = &params.updater;
    let hx = g.concat_channels(&[hidden, f_m, context])?;
    let gate_in = match &u.mix {
        Some(mix) => mix[0].forward(g, p, hx)?,
        None => hx,
    };
    let zr = u.gates.forward(g, p, gate_in)?;
    let z = g.slice_channels(zr, 0, u.hidden_dim)?;
    let r = g.slice_channels(zr, u.hidden_dim, u.hidden_dim)?;
    let rh = g.mul(r, hidden)?;
    let cand_in = g.concat_channels(&[rh, f_m, context])?;
    let cand_in = match &u.mix {
        Some(mix) => mix[1].forward(g, p, cand_in)?,
        None => cand_in,
    };
    let q = u.candidate.forward(g, p, cand_in)?;
    // h' = h + z·(q − h) = (1 − z)·h + z·q
    let dq = g.sub(q, hidden)?;
    let step = g.mul(z, dq)?;
    let hidden = g.add(hidden, step)?;

    let x = params.flow_head[0].forward(g, p, hidden)?;
    let delta = params.flow_head[1].forward(g, p, x)?;
    let prev = g.slice_channels(delta, 0, 2)?;
    let next = g.slice_channels(delta, 2, 2)?;
    Ok((hidden, FlowPair { prev, next }))
}

/// Which flow directions a refinement pass estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Directions {
    Both,
    PrevOnly,
    NextOnly,
}

impl Directions {
    fn prev(self) -> bool {
        self != Directions::NextOnly
    }

    fn next(self) -> bool {
        self != Directions::PrevOnly
    }
}

/// Unit state carried between iterations.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UnitState {
    pub hidden: Var,
    pub flows: FlowPair,
    /// `M_t^k`, when the motion-propagation encoder is in use.
    pub motion: Option<Var>,
}

/// Constants shared by every unit of one forward pass.
pub(crate) struct Shared {
    pub zeros_flow: Var,
    pub zeros_corr: Var,
    /// Learned initial motion state broadcast over the grid.
    pub m0: Option<Var>,
    pub upsample_coords: Var,
    pub downsample: usize,
}

impl Shared {
    pub fn new<T: Real>(g: &mut Graph<T>, net: &VideoFlowNet<T>, p: &Bound, h: usize, w: usize) -> Result<Self> {
        let s = net.config.downsample;
        let zeros_flow = g.constant(Tensor::zeros([2, h, w]));
        let zeros_corr = g.constant(Tensor::zeros([net.config.lookup_spec().channels(), h, w]));
        let m0 = match &net.trof.motion {
            MotionEncoder::Mop(enc) => Some(g.expand_spatial(p.var(enc.initial_state), h, w)?),
            MotionEncoder::Trof(_) => None,
        };
        let upsample_coords = g.constant(upsample_grid(h, w, s));
        Ok(Shared { zeros_flow, zeros_corr, m0, upsample_coords, downsample: s })
    }

    pub fn initial_state(&self, context: Var) -> UnitState {
        UnitState {
            hidden: context,
            flows: FlowPair { prev: self.zeros_flow, next: self.zeros_flow },
            motion: self.m0,
        }
    }
}

/// Sampling grid that maps image pixel centers onto the feature grid.
pub(crate) fn upsample_grid<T: Real>(h: usize, w: usize, s: usize) -> Tensor<T> {
    let (hi, wi) = (h * s, w * s);
    let sf = s as f64;
    Tensor::from_fn([2, hi, wi], |idx| {
        let (c, rem) = (idx / (hi * wi), idx % (hi * wi));
        let (y, x) = (rem / wi, rem % wi);
        let v = if c == 0 { x } else { y };
        T::from_f64((v as f64 + 0.5) / sf - 0.5)
    })
}

/// Bilinear upsampling by `s` with flow magnitudes scaled by `s`.
pub(crate) fn upsample_flow<T: Real>(g: &mut Graph<T>, shared: &Shared, flow: Var) -> Result<Var> {
    let up = g.bilinear_sample(flow, shared.upsample_coords)?;
    Ok(g.scale(up, T::from_f64(shared.downsample as f64)))
}

/// One refinement iteration of one unit. `neighbours` are the
/// `(m_fwd, m_bwd)` motion features, already warped or substituted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn refine_step<T: Real>(
    g: &mut Graph<T>,
    net: &VideoFlowNet<T>,
    p: &Bound,
    shared: &Shared,
    vol: &DualCorrelationVolume,
    context: Var,
    state: &UnitState,
    neighbours: Option<(Var, Var)>,
    dirs: Directions,
) -> Result<UnitState> {
    let params = &net.trof;
    let (c_prev, c_next) = corrvol::lookup(g, vol, &state.flows, net.config.lookup_spec())?;
    let c_prev = if dirs.prev() { c_prev } else { shared.zeros_corr };
    let c_next = if dirs.next() { c_next } else { shared.zeros_corr };
    let (f_corr, f_flow) = corr_flow_encode(g, params, p, c_prev, c_next, &state.flows)?;
    let (f_m, motion) = match (&params.motion, state.motion, neighbours) {
        (MotionEncoder::Trof(conv), _, _) => (motion_encode_trof(g, conv, p, f_corr, f_flow)?, None),
        (MotionEncoder::Mop(enc), Some(m_self), Some((m_fwd, m_bwd))) => {
            let (f_m, m_next) = mop::motion_encode_mop(g, enc, p, f_corr, f_flow, m_self, m_fwd, m_bwd)?;
            (f_m, Some(m_next))
        }
        (MotionEncoder::Mop(_), _, _) => {
            return Err(Error::InvalidArgument("motion-propagation encoder needs motion states".into()))
        }
    };
    let (hidden, delta) = update_step(g, params, p, f_m, context, state.hidden)?;
    let prev = if dirs.prev() { g.add(state.flows.prev, delta.prev)? } else { state.flows.prev };
    let next = if dirs.next() { g.add(state.flows.next, delta.next)? } else { state.flows.next };
    Ok(UnitState { hidden, flows: FlowPair { prev, next }, motion })
}

pub(crate) fn record<T: Real>(
    g: &mut Graph<T>,
    shared: &Shared,
    pred: &mut Prediction,
    flows: FlowPair,
) -> Result<()> {
    pred.feature.push(flows);
    let prev = upsample_flow(g, shared, flows.prev)?;
    let next = upsample_flow(g, shared, flows.next)?;
    pred.image.push(FlowPair { prev, next });
    Ok(())
}

/// Three-frame estimation: `iters` refinement steps from zero flow. With
/// the motion-propagation encoder, both neighbour slots receive the
/// learned initial motion state.
pub fn trof_forward<T: Real>(
    g: &mut Graph<T>,
    net: &VideoFlowNet<T>,
    p: &Bound,
    frames: [Var; 3],
    iters: usize,
) -> Result<Prediction> {
    if iters == 0 {
        return Err(Error::InvalidArgument("refinement iterations must be ≥ 1".into()));
    }
    let enc = encode_features(g, net, p, frames)?;
    let cfg = &net.config;
    let vol = corrvol::build_dual_corr(g, enc.feat_center, enc.feat_prev, enc.feat_next, cfg.corr_levels, cfg.corr_normalize)?;
    let [_, h, w] = *g.shape(enc.feat_center) else { unreachable!("encoder output is 3-D") };
    let shared = Shared::new(g, net, p, h, w)?;
    let mut state = shared.initial_state(enc.context);
    let mut pred = Prediction::default();
    for _ in 0..iters {
        let neighbours = shared.m0.map(|m0| (m0, m0));
        state = refine_step(g, net, p, &shared, &vol, enc.context, &state, neighbours, Directions::Both)?;
        record(g, &shared, &mut pred, state.flows)?;
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            feat_dim: 8,
            corr_dim: 8,
            flow_dim: 4,
            motion_dim: 6,
            hidden_dim: 6,
            corr_radius: 1,
            ..ModelConfig::default()
        }
    }

    fn frame(g: &mut Graph<f32>, seed: u32) -> Var {
        g.constant(Tensor::from_fn([3, 16, 16], |i| ((i as f32 * 0.173 + seed as f32 * 1.9).sin() + 1.0) / 2.0))
    }

    #[test]
    fn identical_frames_share_features() {
        let net = VideoFlowNet::<f32>::new(small(), 3).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let f = frame(&mut g, 0);
        let e = encode_features(&mut g, &net, &p, [f, f, f]).unwrap();
        assert!(g.value(e.feat_prev).bit_identical(g.value(e.feat_center)));
        assert!(g.value(e.feat_next).bit_identical(g.value(e.feat_center)));
        assert_eq!(g.shape(e.feat_center), &[8, 4, 4]);
        assert_eq!(g.shape(e.context), &[6, 4, 4]);
    }

    #[test]
    fn swapping_neighbours_swaps_features() {
        let net = VideoFlowNet::<f32>::new(small(), 3).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let (a, b, c) = (frame(&mut g, 1), frame(&mut g, 2), frame(&mut g, 3));
        let e1 = encode_features(&mut g, &net, &p, [a, b, c]).unwrap();
        let e2 = encode_features(&mut g, &net, &p, [c, b, a]).unwrap();
        assert!(g.value(e1.feat_prev).bit_identical(g.value(e2.feat_next)));
        assert!(g.value(e1.feat_next).bit_identical(g.value(e2.feat_prev)));
        assert!(g.value(e1.feat_center).bit_identical(g.value(e2.feat_center)));
        assert!(g.value(e1.context).bit_identical(g.value(e2.context)));
    }

    #[test]
    fn rejects_indivisible_frames() {
        let net = VideoFlowNet::<f32>::new(small(), 3).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let f = g.constant(Tensor::zeros([3, 18, 16]));
        assert!(encode_features(&mut g, &net, &p, [f, f, f]).is_err());
    }

    #[test]
    fn zero_flow_head_never_moves() {
        let mut net = VideoFlowNet::<f32>::new(small(), 5).unwrap();
        let head = net.trof.flow_head[1];
        *net.params.get_mut(head.weight) = Tensor::zeros(net.params.get(head.weight).shape().to_vec());
        *net.params.get_mut(head.bias) = Tensor::zeros([4]);
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let (a, b, c) = (frame(&mut g, 1), frame(&mut g, 2), frame(&mut g, 3));
        let pred = trof_forward(&mut g, &net, &p, [a, b, c], 3).unwrap();
        assert_eq!(pred.feature.len(), 3);
        for fp in pred.feature.iter().chain(&pred.image) {
            assert!(g.value(fp.prev).data().iter().all(|&v| v == 0.0));
            assert!(g.value(fp.next).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_shapes_and_count() {
        let net = VideoFlowNet::<f32>::new(small(), 5).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let (a, b, c) = (frame(&mut g, 1), frame(&mut g, 2), frame(&mut g, 3));
        let pred = trof_forward(&mut g, &net, &p, [a, b, c], 4).unwrap();
        assert_eq!(pred.feature.len(), 4);
        assert_eq!(pred.image.len(), 4);
        assert_eq!(g.shape(pred.feature[0].prev), &[2, 4, 4]);
        assert_eq!(g.shape(pred.image[3].next), &[2, 16, 16]);
        assert!(trof_forward(&mut g, &net, &p, [a, b, c], 0).is_err());
    }

    #[test]
    fn upsampling_scales_constant_flow() {
        let net = VideoFlowNet::<f32>::new(small(), 5).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let shared = Shared::new(&mut g, &net, &p, 4, 4).unwrap();
        let f = g.constant(Tensor::full([2, 4, 4], 0.75));
        let up = upsample_flow(&mut g, &shared, f).unwrap();
        assert!(g.value(up).data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn gated_update_keeps_tanh_range() {
        let net = VideoFlowNet::<f32>::new(small(), 9).unwrap();
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let f_m = g.constant(Tensor::from_fn([6, 4, 4], |i| (i as f32).sin() * 3.0));
        let ctx = g.constant(Tensor::from_fn([6, 4, 4], |i| (i as f32).cos() * 3.0));
        let h = g.constant(Tensor::from_fn([6, 4, 4], |i| (i as f32 * 0.7).sin() * 0.99));
        let (h2, _) = update_step(&mut g, &net.trof, &p, f_m, ctx, h).unwrap();
        assert!(g.value(h2).data().iter().all(|v| v.abs() < 1.0));
    }
}

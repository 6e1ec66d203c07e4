//! Model configuration and parameter layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corrvol::LookupWindowSpec;
use crate::error::{Error, Result};
use crate::mop::MopEncoder;
use crate::nn::{Activation, Conv, DepthwiseConv, Init, ParamStore};
use crate::tensor::Real;
use crate::trof::{Encoder, MotionEncoder, TrofParams, Updater};

/// Ablation switches. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Off: each direction is refined by its own pass and never sees the
    /// other direction's correlation or flow.
    pub bidirectional: bool,
    /// Off: per-direction passes whose final hidden states are combined once
    /// by a separate fusion layer.
    pub recurrent_fusion: bool,
    /// Off: neighbour motion states are always the learned initial state.
    pub mop: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { bidirectional: true, recurrent_fusion: true, mop: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Feature grid downsampling factor `s` (a power of two).
    pub downsample: usize,
    /// `D`, correlation feature width.
    pub feat_dim: usize,
    /// `D_c`
    pub corr_dim: usize,
    /// `D_f`
    pub flow_dim: usize,
    /// `D_m`
    pub motion_dim: usize,
    /// `D_h`, hidden and context width.
    pub hidden_dim: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    /// Scale correlations by `1/√D`.
    pub corr_normalize: bool,
    /// Large-kernel depthwise mixing in the updater instead of dense 3×3 gates.
    pub depthwise_updater: bool,
    /// Use the motion-propagation encoder (with a learned initial state);
    /// otherwise the plain tri-frame motion encoder.
    pub mop_encoder: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            downsample: 4,
            feat_dim: 64,
            corr_dim: 96,
            flow_dim: 32,
            motion_dim: 96,
            hidden_dim: 64,
            corr_levels: 2,
            corr_radius: 3,
            corr_normalize: true,
            depthwise_updater: false,
            mop_encoder: true,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn lookup_spec(&self) -> LookupWindowSpec {
        LookupWindowSpec { levels: self.corr_levels, radius: self.corr_radius }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return bad("model.downsample must be a power of two ≥ 2");
        }
        let dims = [
            self.in_channels,
            self.feat_dim,
            self.corr_dim,
            self.flow_dim,
            self.motion_dim,
            self.hidden_dim,
            self.corr_levels,
        ];
        if dims.contains(&0) {
            return bad("model widths and corr_levels must be positive");
        }
        Ok(())
    }
}

/// The full network: parameters plus the layer layout that indexes them.
#[derive(Clone, Debug)]
pub struct VideoFlowNet<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub trof: TrofParams,
    /// One-shot fusion of the two per-direction passes; present only when
    /// bidirectional estimation is on and recurrent fusion is off.
    pub fusion: Option<Conv>,
}

impl<T: Real> VideoFlowNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let c = &config;
        let relu = Activation::Relu;

        let encoder = |store: &mut ParamStore<T>, init: &mut Init<'_>, name: &str, out: usize, normalize: bool| {
            let c1 = (c.feat_dim / 4).max(8);
            let c2 = (c.feat_dim / 2).max(8);
            let mut layers = Vec::new();
            let mut c_in = c.in_channels;
            let blocks = c.downsample.trailing_zeros() as usize;
            for b in 0..blocks {
                let c_out = if b == 0 { c1 } else { c2 };
                let conv = Conv::new(store, init, &format!("{name}.down{b}"), c_in, c_out, 3, relu, 2f64.sqrt());
                layers.push(conv.pooled());
                c_in = c_out;
            }
            layers.push(Conv::new(store, init, &format!("{name}.out"), c_in, out, 3, Activation::None, 1.0));
            Encoder { layers, normalize }
        };
        let feature_encoder = encoder(&mut store, &mut init, "fnet", c.feat_dim, true);
        let context_encoder = encoder(&mut store, &mut init, "cnet", c.hidden_dim, false);

        let corr_in = 2 * c.lookup_spec().channels();
        let g2 = 2f64.sqrt();
        let corr_encoder = [
            Conv::new(&mut store, &mut init, "corr_enc.0", corr_in, c.corr_dim, 1, relu, g2),
            Conv::new(&mut store, &mut init, "corr_enc.1", c.corr_dim, c.corr_dim, 3, relu, g2),
        ];
        let flow_encoder = [
            Conv::new(&mut store, &mut init, "flow_enc.0", 4, c.flow_dim, 7, relu, g2),
            Conv::new(&mut store, &mut init, "flow_enc.1", c.flow_dim, c.flow_dim, 3, relu, g2),
        ];
        let fused = c.corr_dim + c.flow_dim;
        let motion = if c.mop_encoder {
            MotionEncoder::Mop(MopEncoder::new(&mut store, &mut init, fused, c.motion_dim))
        } else {
            MotionEncoder::Trof(Conv::new(&mut store, &mut init, "motion_enc", fused, c.motion_dim, 3, relu, g2))
        };
        let updater = Updater::new(&mut store, &mut init, c.motion_dim, c.hidden_dim, c.depthwise_updater);
        let flow_head = [
            Conv::new(&mut store, &mut init, "flow_head.0", c.hidden_dim, c.hidden_dim, 3, relu, g2),
            Conv::new(&mut store, &mut init, "flow_head.1", c.hidden_dim, 4, 3, Activation::None, 0.1),
        ];
        let fusion = (c.ablation.bidirectional && !c.ablation.recurrent_fusion).then(|| {
            Conv::new(&mut store, &mut init, "fusion", 2 * c.hidden_dim, 4, 3, Activation::None, 0.1)
        });
        let trof = TrofParams {
            feature_encoder,
            context_encoder,
            corr_encoder,
            flow_encoder,
            motion,
            updater,
            flow_head,
        };
        Ok(VideoFlowNet { config, params: store, trof, fusion })
    }

    /// Same layout and values in another precision.
    pub fn cast<U: Real>(&self) -> VideoFlowNet<U> {
        VideoFlowNet {
            config: self.config.clone(),
            params: self.params.cast(),
            trof: self.trof.clone(),
            fusion: self.fusion,
        }
    }
}

impl Updater {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        motion_dim: usize,
        hidden_dim: usize,
        depthwise: bool,
    ) -> Self {
        let c_in = 2 * hidden_dim + motion_dim;
        let (k, mix) = if depthwise {
            (
                1,
                Some([
                    DepthwiseConv::new(store, init, "update.mix_gates", c_in, 7),
                    DepthwiseConv::new(store, init, "update.mix_cand", c_in, 7),
                ]),
            )
        } else {
            (3, None)
        };
        let gates = Conv::new(store, init, "update.gates", c_in, 2 * hidden_dim, k, Activation::Sigmoid, 1.0);
        let candidate = Conv::new(store, init, "update.cand", c_in, hidden_dim, k, Activation::Tanh, 1.0);
        Updater { mix, gates, candidate, hidden_dim }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_builds_and_is_seeded() {
        let a = VideoFlowNet::<f32>::new(ModelConfig::default(), 7).unwrap();
        let b = VideoFlowNet::<f32>::new(ModelConfig::default(), 7).unwrap();
        let c = VideoFlowNet::<f32>::new(ModelConfig::default(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert!(a.fusion.is_none());
        let head = a.trof.flow_head[1];
        assert_eq!(head.out_channels(&a.params), 4);
    }

    #[test]
    fn fusion_layer_only_without_recurrent_fusion() {
        let mut cfg = ModelConfig::default();
        cfg.ablation.recurrent_fusion = false;
        assert!(VideoFlowNet::<f32>::new(cfg.clone(), 0).unwrap().fusion.is_some());
        cfg.ablation.bidirectional = false;
        assert!(VideoFlowNet::<f32>::new(cfg, 0).unwrap().fusion.is_none());
    }

    #[test]
    fn rejects_bad_downsample() {
        let cfg = ModelConfig { downsample: 3, ..ModelConfig::default() };
        assert!(VideoFlowNet::<f32>::new(cfg, 0).is_err());
    }
}

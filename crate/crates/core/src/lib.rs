//! Multi-frame optical flow: tri-frame units that jointly refine the flows
//! from a center frame to both of its neighbours, bridged across longer
//! clips by warping per-unit motion states along the current flow
//! estimates.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`Graph`])
//! generic over `f32`/`f64`.

pub mod config;
pub mod corrvol;
pub mod error;
pub mod flowio;
pub mod gradcheck;
pub mod graph;
pub mod infer;
mod kernels;
pub mod model;
pub mod mop;
pub mod nn;
pub mod selftest;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod trof;

pub use corrvol::{DualCorrelationVolume, LookupWindowSpec};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Ablation, ModelConfig, VideoFlowNet};
pub use mop::{videoflow_forward, ClipLayout};
pub use tensor::{Real, Tensor};
pub use trof::{trof_forward, FlowPair, Prediction};

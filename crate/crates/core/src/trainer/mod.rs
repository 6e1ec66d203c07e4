//! Loss, optimization, checkpoints, evaluation and ablation runs.

mod ablate;
mod checkpoint;
mod eval;
mod loss;
mod optim;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use checkpoint::{Checkpoint, RngState};
pub use eval::{evaluate, evaluate_with, EvalReport};
pub use loss::{sequence_loss, FlowTarget};
pub use optim::{clip_grad_norm, AdamW, OneCycle};
pub use train::{train, StepLog, TrainConfig, TrainOutcome, Trainer};

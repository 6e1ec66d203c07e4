use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, RngState};
use super::loss::{sequence_loss, FlowTarget};
use super::optim::{clip_grad_norm, AdamW, OneCycle};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelConfig, VideoFlowNet};
use crate::mop::videoflow_forward;
use crate::synthdata::SyntheticSequence;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Refinement iterations `N`.
    pub iters: usize,
    /// Loss decay `γ`.
    pub gamma: f64,
    /// Also supervise the zero initialization as iteration 0.
    pub include_initial: bool,
    /// Frames per training clip; `T = clip_frames − 2` centers are
    /// supervised per clip.
    pub clip_frames: usize,
    pub steps: usize,
    /// Clips per step.
    pub batch: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Learning rate at the first and last step.
    pub final_lr: f64,
    /// Fraction of steps spent ramping up.
    pub warmup: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a log line every this many steps.
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 12,
            gamma: 0.85,
            include_initial: false,
            clip_frames: 5,
            steps: 2000,
            batch: 2,
            lr: 2.5e-4,
            final_lr: 1e-6,
            warmup: 0.05,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            seed: 0,
            log_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iters == 0 {
            return bad("train.iters must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("train.gamma must lie in (0, 1]");
        }
        if self.clip_frames < 3 {
            return bad("train.clip_frames must be at least 3");
        }
        if self.batch == 0 {
            return bad("train.batch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return bad("train.warmup must lie in [0, 1]");
        }
        if self.lr < 0.0 || self.final_lr < 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("learning rates, weight decay and clip norm must be non-negative");
        }
        if self.log_every == 0 {
            return bad("train.log_every must be at least 1");
        }
        self.model.validate()
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle { peak: self.lr, floor: self.final_lr, warmup: self.warmup, steps: self.steps }
    }
}

/// One training clip: `clip_frames` consecutive frames of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ClipRef {
    sequence: usize,
    start: usize,
}

/// Per-step progress passed to the logging callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based count of completed steps.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("step={} loss={:.6} lr={:.6e}", self.step, self.loss, self.lr)
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

fn clip_refs(data: &[SyntheticSequence], clip_frames: usize) -> Result<Vec<ClipRef>> {
    let mut refs = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        let f = seq.frames.len();
        if f < clip_frames {
            return Err(Error::InvalidArgument(format!(
                "sequence {i} has {f} frames, shorter than the clip length {clip_frames}"
            )));
        }
        refs.extend((0..=f - clip_frames).map(|start| ClipRef { sequence: i, start }));
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    Ok(refs)
}

/// Loss and parameter gradients of one clip.
fn clip_gradients(
    net: &VideoFlowNet<f32>,
    cfg: &TrainConfig,
    seq: &SyntheticSequence,
    start: usize,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let frames: Vec<_> = seq.frames[start..start + cfg.clip_frames].iter().map(|f| g.constant(f.clone())).collect();
    let preds = videoflow_forward(&mut g, net, &p, &frames, cfg.iters)?;
    // center u of the clip is sequence frame start + u + 1, i.e. entry start + u
    let targets: Vec<FlowTarget> = (0..preds.len())
        .map(|u| {
            let i = start + u;
            FlowTarget { prev: g.constant(seq.gt_bwd[i].clone()), next: g.constant(seq.gt_fwd[i].clone()) }
        })
        .collect();
    let loss = sequence_loss(&mut g, &preds, &targets, cfg.gamma, cfg.include_initial)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(net.params.iter())
        .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Optimizer state over a model being trained.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: VideoFlowNet<f32>,
    opt: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = VideoFlowNet::new(config.model.clone(), config.seed)?;
        let opt = AdamW::new(net.params.iter().map(|(_, t)| t), config.weight_decay as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer { config, net, opt, rng, order: Vec::new(), cursor: 0, step: 0 })
    }

    fn next_batch(&mut self, n_clips: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch);
        while batch.len() < self.config.batch {
            if self.cursor == self.order.len() {
                self.order = (0..n_clips).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Runs the remaining configured steps on `data`.
    pub fn run(&mut self, data: &[SyntheticSequence], log: impl FnMut(&StepLog)) -> Result<Vec<f64>> {
        self.run_until(data, self.config.steps, log)
    }

    /// Trains until `stop` steps are complete (capped at the configured
    /// total), following the schedule of the full run.
    pub fn run_until(
        &mut self,
        data: &[SyntheticSequence],
        stop: usize,
        mut log: impl FnMut(&StepLog),
    ) -> Result<Vec<f64>> {
        let clips = clip_refs(data, self.config.clip_frames)?;
        let schedule = self.config.schedule();
        let stop = stop.min(self.config.steps);
        let mut losses = Vec::with_capacity(stop.saturating_sub(self.step));
        while self.step < stop {
            let batch: Vec<ClipRef> = self.next_batch(clips.len()).into_iter().map(|i| clips[i]).collect();
            let results: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|c| clip_gradients(&self.net, &self.config, &data[c.sequence], c.start))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            let loss = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss is {loss} at step {}", self.step + 1)));
            }
            let mut grads = Vec::new();
            for (_, g) in results {
                if grads.is_empty() {
                    grads = g;
                } else {
                    for (acc, x) in grads.iter_mut().zip(&g) {
                        acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
            let lr = schedule.lr(self.step);
            self.opt.step(self.net.params.tensors_mut(), &grads, lr as f32);
            self.step += 1;
            losses.push(loss);
            if self.step.is_multiple_of(self.config.log_every) || self.step == self.config.steps {
                log(&StepLog { step: self.step, loss, lr, grad_norm });
            }
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            rng: RngState { seed: self.config.seed, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
            params: self.net.params.clone(),
        }
    }
}

/// Trains a fresh model from `config.seed`.
pub fn train(config: &TrainConfig, data: &[SyntheticSequence], log: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let losses = if config.steps == 0 { Vec::new() } else { trainer.run(data, log)? };
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), losses })
}

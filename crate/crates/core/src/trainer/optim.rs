use crate::tensor::Tensor;

/// Adam with decoupled weight decay. The decay is scaled by the learning
/// rate, so a zero learning rate leaves parameters untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>, weight_decay: f32) -> Self {
        let (m, v) = params.into_iter().map(|t| (vec![0.0; t.numel()], vec![0.0; t.numel()])).unzip();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<f32>>, grads: &[Tensor<f32>], lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i].data());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}

/// One-cycle schedule: linear ramp from `floor` to `peak` over the first
/// `warmup` fraction of `steps`, then linear decay back to `floor` at the
/// last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub floor: f64,
    pub warmup: f64,
    pub steps: usize,
}

impl OneCycle {
    /// Learning rate of 0-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.peak;
        }
        let last = (self.steps - 1) as f64;
        let top = (self.warmup * last).round();
        let s = step as f64;
        if s < top {
            self.floor + (self.peak - self.floor) * s / top
        } else if s >= last {
            self.floor
        } else {
            self.peak + (self.floor - self.peak) * (s - top) / (last - top)
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

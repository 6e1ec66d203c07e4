//! Central finite-difference gradient checking in double precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Tolerances and sampling for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Used for an element whose central difference at `eps` disagrees,
    /// which happens when `[x − eps, x + eps]` straddles a kink (relu,
    /// bilinear cell boundary).
    pub fine_eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Below this magnitude the absolute tolerance applies.
    pub small: f64,
    /// Upper bound on checked elements per input; larger inputs are
    /// subsampled with a fixed seed.
    pub max_elems: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-3, fine_eps: 1e-6, rel_tol: 1e-4, abs_tol: 1e-6, small: 1e-4, max_elems: 48, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: usize,
    /// Elements that only agreed at `fine_eps`.
    pub refined: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

impl GradCheck {
    fn error(&self, analytic: f64, numeric: f64) -> (f64, bool) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale < self.small {
            (diff, diff <= self.abs_tol)
        } else {
            let rel = diff / scale;
            (rel, rel <= self.rel_tol)
        }
    }

    /// Compares the gradient of the scalar `f(inputs)` produced by
    /// [`Graph::backward`] against central differences for every input.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradReport::default();
        let mut values = inputs.to_vec();
        for (i, &v) in vars.iter().enumerate() {
            let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
            let n = inputs[i].numel();
            let picks: Vec<usize> = if n <= self.max_elems {
                (0..n).collect()
            } else {
                sample(&mut rng, n, self.max_elems).into_vec()
            };
            for idx in picks {
                let base = values[i].data()[idx];
                let mut central = |eps: f64| -> Result<f64> {
                    values[i].data_mut()[idx] = base + eps;
                    let up = eval(&values)?;
                    values[i].data_mut()[idx] = base - eps;
                    let down = eval(&values)?;
                    values[i].data_mut()[idx] = base;
                    Ok((up - down) / (2.0 * eps))
                };
                let a = analytic.data()[idx];
                let mut numeric = central(self.eps)?;
                let (mut err, mut ok) = self.error(a, numeric);
                if !ok {
                    numeric = central(self.fine_eps)?;
                    (err, ok) = self.error(a, numeric);
                    if ok {
                        report.refined += 1;
                    }
                }
                report.checked += 1;
                if !ok {
                    report.failures += 1;
                }
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    report.worst = Some((i, idx, a, numeric));
                }
            }
        }
        Ok(report)
    }
}

/// Uniform `[-1, 1]` tensor from a seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..=1.0))
}

/// Reduces `x` to a scalar as `Σ x ⊙ w` with a fixed random `w`, so that
/// every output element carries a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random_tensor(g.shape(x), seed ^ 0x9e37_79b9_7f4a_7c15));
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

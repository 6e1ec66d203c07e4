use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::trof::Prediction;

/// Ground-truth bi-directional flow of one center frame at image
/// resolution: `(gt_{t→t−1}, gt_{t→t+1})`.
#[derive(Clone, Copy, Debug)]
pub struct FlowTarget {
    pub prev: Var,
    pub next: Var,
}

/// Exponentially weighted L1 over refinement iterations:
///
/// `L = Σ_t Σ_{k=1..N} γ^{N−k} (‖gt_prev − f^k_prev‖₁ + ‖gt_next − f^k_next‖₁)`
///
/// where `‖·‖₁` is the mean absolute error over pixels and components. With
/// `include_initial`, the zero initialization is supervised as a `k = 0`
/// term with weight `γ^N`.
pub fn sequence_loss<T: Real>(
    g: &mut Graph<T>,
    predictions: &[Prediction],
    targets: &[FlowTarget],
    gamma: f64,
    include_initial: bool,
) -> Result<Var> {
    if predictions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted centers but {} ground-truth centers",
            predictions.len(),
            targets.len()
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("loss decay {gamma} outside (0, 1]")));
    }
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph<T>, term: Var| -> Result<()> {
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        Ok(())
    };
    for (pred, gt) in predictions.iter().zip(targets) {
        let n = pred.image.len();
        if n == 0 {
            return Err(Error::InvalidArgument("prediction without iterations".into()));
        }
        if include_initial {
            let zero = g.constant(Tensor::zeros(g.shape(gt.prev).to_vec()));
            let a = g.l1_mean(gt.prev, zero)?;
            let b = g.l1_mean(gt.next, zero)?;
            let ab = g.add(a, b)?;
            let term = g.scale(ab, T::from_f64(gamma.powi(n as i32)));
            push(g, term)?;
        }
        for (k, fp) in pred.image.iter().enumerate() {
            let weight = gamma.powi((n - 1 - k) as i32);
            let a = g.l1_mean(gt.prev, fp.prev)?;
            let b = g.l1_mean(gt.next, fp.next)?;
            let ab = g.add(a, b)?;
            let term = g.scale(ab, T::from_f64(weight));
            push(g, term)?;
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("no centers to supervise".into()))
}

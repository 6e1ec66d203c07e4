use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flowio::{MetricsAccumulator, MetricsReport};
use crate::infer::{predict_clip, CenterFlow};
use crate::model::VideoFlowNet;
use crate::synthdata::SyntheticSequence;
use crate::tensor::Tensor;

/// Metrics per direction. `backward` compares `f_{t→t−1}` from normal-order
/// inference with the backward ground truth; `backward_reversed` obtains
/// the same flow by running the reversed sequence and reading its forward
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub forward: MetricsReport,
    pub backward: MetricsReport,
    pub backward_reversed: Option<MetricsReport>,
}

impl EvalReport {
    pub fn to_key_value(&self) -> String {
        let mut parts = vec![self.forward.to_key_value("fwd"), self.backward.to_key_value("bwd")];
        if let Some(r) = &self.backward_reversed {
            parts.push(r.to_key_value("bwd_rev"));
        }
        parts.join("\n")
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::json!({
            "forward": self.forward,
            "backward": self.backward,
            "backward_reversed": self.backward_reversed,
        });
        serde_json::to_string_pretty(&value).expect("report serializes")
    }
}

fn check_centers(seq: &SyntheticSequence, flows: &[CenterFlow]) -> Result<()> {
    if flows.len() != seq.centers() || flows.iter().enumerate().any(|(i, f)| f.frame != i + 1) {
        return Err(Error::InvalidArgument(format!(
            "predictor returned {} centers, sequence has {}",
            flows.len(),
            seq.centers()
        )));
    }
    Ok(())
}

/// Evaluates an arbitrary predictor that maps a frame sequence to the
/// flows of all its center frames.
pub fn evaluate_with<P>(data: &[SyntheticSequence], reversed: bool, predict: P) -> Result<EvalReport>
where
    P: Fn(&[Tensor<f32>]) -> Result<Vec<CenterFlow>> + Sync,
{
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let runs: Vec<(Vec<CenterFlow>, Option<Vec<CenterFlow>>)> = data
        .par_iter()
        .map(|seq| {
            let normal = predict(&seq.frames)?;
            check_centers(seq, &normal)?;
            let rev = if reversed {
                let frames: Vec<_> = seq.frames.iter().rev().cloned().collect();
                let r = predict(&frames)?;
                check_centers(seq, &r)?;
                Some(r)
            } else {
                None
            };
            Ok((normal, rev))
        })
        .collect::<Result<_>>()?;

    let (mut fwd, mut bwd, mut bwd_rev) = (MetricsAccumulator::new(), MetricsAccumulator::new(), MetricsAccumulator::new());
    for (seq, (normal, rev)) in data.iter().zip(&runs) {
        let valid = Some(seq.valid.as_slice());
        for (i, cf) in normal.iter().enumerate() {
            fwd.add(&cf.next, &seq.gt_fwd[i], valid, Some(&seq.occl_fwd[i]))?;
            bwd.add(&cf.prev, &seq.gt_bwd[i], valid, Some(&seq.occl_bwd[i]))?;
        }
        if let Some(rev) = rev {
            let last = seq.frames.len() - 1;
            for cf in rev {
                // reversed frame r is original frame last − r
                let i = last - cf.frame - 1;
                bwd_rev.add(&cf.next, &seq.gt_bwd[i], valid, Some(&seq.occl_bwd[i]))?;
            }
        }
    }
    Ok(EvalReport {
        forward: fwd.finish()?,
        backward: bwd.finish()?,
        backward_reversed: if reversed { Some(bwd_rev.finish()?) } else { None },
    })
}

/// Runs the model over every whole sequence and reports final-iteration
/// metrics.
pub fn evaluate(net: &VideoFlowNet<f32>, data: &[SyntheticSequence], iters: usize, reversed: bool) -> Result<EvalReport> {
    evaluate_with(data, reversed, |frames| predict_clip(net, frames, iters))
}

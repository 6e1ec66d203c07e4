use super::eval::{evaluate, EvalReport};
use super::train::{train, StepLog, TrainConfig};
use crate::error::Result;
use crate::model::Ablation;
use crate::synthdata::SyntheticSequence;

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub flags: Ablation,
    pub report: EvalReport,
}

/// Baseline first, then one row per disabled component.
#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn variants(base: Ablation) -> [(&'static str, Ablation); 4] {
    [
        ("baseline", base),
        ("bidirectional=off", Ablation { bidirectional: false, ..base }),
        ("recurrent_fusion=off", Ablation { recurrent_fusion: false, ..base }),
        ("mop=off", Ablation { mop: false, ..base }),
    ]
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl AblationTable {
    /// Side-by-side table; `Δ` columns are relative to the baseline.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<22} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "variant", "fwd_aepe", "Δfwd", "bwd_aepe", "Δbwd", "matched", "unmatched"
        );
        let base = &self.rows[0].report;
        for row in &self.rows {
            let r = &row.report;
            out += &format!(
                "{:<22} {:>10.4} {:>+10.4} {:>10.4} {:>+10.4} {:>10} {:>10}\n",
                row.name,
                r.forward.aepe,
                r.forward.aepe - base.forward.aepe,
                r.backward.aepe,
                r.backward.aepe - base.backward.aepe,
                opt(r.forward.matched),
                opt(r.forward.unmatched),
            );
        }
        out
    }
}

/// Trains and evaluates the baseline and each single-component ablation
/// with otherwise identical settings and seed.
pub fn ablate(
    config: &TrainConfig,
    train_data: &[SyntheticSequence],
    eval_data: &[SyntheticSequence],
    mut log: impl FnMut(&str, &StepLog),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(4);
    for (name, flags) in variants(config.model.ablation) {
        let mut cfg = config.clone();
        cfg.model.ablation = flags;
        let outcome = train(&cfg, train_data, |s| log(name, s))?;
        let net = outcome.checkpoint.model()?;
        let report = evaluate(&net, eval_data, cfg.iters, false)?;
        rows.push(AblationRow { name, flags, report });
    }
    Ok(AblationTable { rows })
}

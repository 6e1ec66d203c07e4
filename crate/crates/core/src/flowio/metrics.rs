use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper edges of the ground-truth magnitude bands; each band is
/// lower-inclusive: `[0, 10)`, `[10, 40)`, `[40, ∞)`.
const BAND_EDGES: [f64; 2] = [10.0, 40.0];

/// Metrics over a pixel set. Bands with no pixels are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pixels: usize,
    pub aepe: f64,
    /// Percentage of outliers.
    pub fl_all: f64,
    pub s0_10: Option<f64>,
    pub s10_40: Option<f64>,
    pub s40_plus: Option<f64>,
    pub matched: Option<f64>,
    pub unmatched: Option<f64>,
}

impl MetricsReport {
    /// One `key=value` line per field, keys prefixed by `prefix` when it is
    /// non-empty. Absent bands print `absent`.
    pub fn to_key_value(&self, prefix: &str) -> String {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"));
        [
            format!("{}={}", key("pixels"), self.pixels),
            format!("{}={:.6}", key("aepe"), self.aepe),
            format!("{}={:.4}", key("fl_all"), self.fl_all),
            format!("{}={}", key("s0_10"), opt(self.s0_10)),
            format!("{}={}", key("s10_40"), opt(self.s10_40)),
            format!("{}={}", key("s40_plus"), opt(self.s40_plus)),
            format!("{}={}", key("matched"), opt(self.matched)),
            format!("{}={}", key("unmatched"), opt(self.unmatched)),
        ]
        .join("\n")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Mean {
    sum: f64,
    count: usize,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Pools pixels from any number of flow fields into one report.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    all: Mean,
    outliers: usize,
    bands: [Mean; 3],
    matched: Mean,
    unmatched: Mean,
}

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&[bool]>, what: &str) -> Result<usize> {
    let n = match *gt.shape() {
        [2, h, w] => h * w,
        ref s => return Err(Error::Shape(format!("flow must be 2×H×W, got {s:?}"))),
    };
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::Shape(format!("{what} mask has {} pixels, flow has {n}", m.len())));
        }
    }
    Ok(n)
}

/// Per-pixel `(EPE, ‖gt‖)`.
fn errors<'a>(pred: &'a Tensor<f32>, gt: &'a Tensor<f32>, n: usize) -> impl Iterator<Item = (f64, f64)> + 'a {
    let (pu, pv) = pred.data().split_at(n);
    let (gu, gv) = gt.data().split_at(n);
    (0..n).map(move |i| {
        let (du, dv) = (pu[i] as f64 - gu[i] as f64, pv[i] as f64 - gv[i] as f64);
        (du.hypot(dv), (gu[i] as f64).hypot(gv[i] as f64))
    })
}

fn is_outlier(epe: f64, mag: f64) -> bool {
    epe > 3.0 && epe > 0.05 * mag
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the pixels of one field. `valid` restricts the pixel set;
    /// `occluded` splits it into matched and unmatched.
    pub fn add(
        &mut self,
        pred: &Tensor<f32>,
        gt: &Tensor<f32>,
        valid: Option<&[bool]>,
        occluded: Option<&[bool]>,
    ) -> Result<()> {
        let n = check_pair(pred, gt, valid, "valid")?;
        check_pair(pred, gt, occluded, "occlusion")?;
        for (i, (epe, mag)) in errors(pred, gt, n).enumerate() {
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            self.all.push(epe);
            self.outliers += is_outlier(epe, mag) as usize;
            let band = BAND_EDGES.iter().take_while(|&&edge| mag >= edge).count();
            self.bands[band].push(epe);
            match occluded.map(|o| o[i]) {
                Some(true) => self.unmatched.push(epe),
                Some(false) => self.matched.push(epe),
                None => {}
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        let aepe = self.all.get().ok_or_else(|| Error::EmptySet("no valid pixels to evaluate".into()))?;
        Ok(MetricsReport {
            pixels: self.all.count,
            aepe,
            fl_all: 100.0 * self.outliers as f64 / self.all.count as f64,
            s0_10: self.bands[0].get(),
            s10_40: self.bands[1].get(),
            s40_plus: self.bands[2].get(),
            matched: self.matched.get(),
            unmatched: self.unmatched.get(),
        })
    }
}

/// Mean end-point error over valid pixels.
pub fn aepe(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: Option<&[bool]>) -> Result<f64> {
    let mut acc = MetricsAccumulator::new();
    acc.add(pred, gt, valid, None)?;
    Ok(acc.finish()?.aepe)
}

/// Percentage of valid pixels whose EPE exceeds both 3 px and 5% of the
/// ground-truth magnitude.
pub fn fl_all(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: Option<&[bool]>) -> Result<f64> {
    let mut acc = MetricsAccumulator::new();
    acc.add(pred, gt, valid, None)?;
    Ok(acc.finish()?.fl_all)
}

/// AEPE per ground-truth magnitude band and per matched/unmatched pixels.
pub fn band_metrics(pred: &Tensor<f32>, gt: &Tensor<f32>, occluded: &[bool]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(pred, gt, None, Some(occluded))?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, u: f32, v: f32) -> Tensor<f32> {
        Tensor::from_fn([2, 1, n], |i| if i < n { u } else { v })
    }

    #[test]
    fn three_four_five() {
        assert_eq!(aepe(&constant(6, 3.0, 4.0), &constant(6, 0.0, 0.0), None).unwrap(), 5.0);
        let f = constant(6, 1.5, -2.0);
        assert_eq!(aepe(&f, &f, None).unwrap(), 0.0);
    }

    #[test]
    fn fl_all_needs_both_conditions() {
        let gt10 = constant(5, 10.0, 0.0);
        assert_eq!(fl_all(&constant(5, 14.0, 0.0), &gt10, None).unwrap(), 100.0);
        assert_eq!(fl_all(&constant(5, 12.0, 0.0), &gt10, None).unwrap(), 0.0);
        let gt100 = constant(5, 100.0, 0.0);
        assert_eq!(fl_all(&constant(5, 104.0, 0.0), &gt100, None).unwrap(), 0.0);
    }

    #[test]
    fn masked_pixels_are_skipped() {
        let pred = Tensor::from_fn([2, 1, 4], |i| [1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0][i]);
        let gt = Tensor::zeros([2, 1, 4]);
        let valid = [true, false, true, false];
        assert_eq!(aepe(&pred, &gt, Some(&valid)).unwrap(), 2.0);
        assert!(matches!(aepe(&pred, &gt, Some(&[false; 4])), Err(Error::EmptySet(_))));
    }

    #[test]
    fn single_band_and_all_occluded() {
        let gt = constant(4, 3.0, 4.0);
        let pred = constant(4, 3.0, 5.0);
        let r = band_metrics(&pred, &gt, &[true; 4]).unwrap();
        assert_eq!(r.s0_10, Some(1.0));
        assert_eq!((r.s10_40, r.s40_plus), (None, None));
        assert_eq!(r.matched, None);
        assert_eq!(r.unmatched, Some(r.aepe));
    }

    #[test]
    fn band_edges_are_lower_inclusive() {
        let gt = Tensor::from_fn([2, 1, 3], |i| [10.0, 40.0, 9.999, 0.0, 0.0, 0.0][i]);
        let pred = Tensor::from_fn([2, 1, 3], |i| [11.0, 43.0, 9.999, 0.0, 0.0, 0.0][i]);
        let r = band_metrics(&pred, &gt, &[false; 3]).unwrap();
        assert_eq!((r.s0_10, r.s10_40, r.s40_plus), (Some(0.0), Some(1.0), Some(3.0)));
        assert_eq!(r.unmatched, None);
    }

    #[test]
    fn key_value_output() {
        let r = band_metrics(&constant(2, 3.0, 4.0), &constant(2, 0.0, 0.0), &[false, false]).unwrap();
        let text = r.to_key_value("fwd");
        assert!(text.contains("fwd.aepe=5.000000"));
        assert!(text.contains("fwd.s40_plus=absent"));
        assert!(r.to_json().contains("\"s40_plus\": null"));
    }
}

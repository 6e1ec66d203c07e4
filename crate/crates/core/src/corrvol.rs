//! Dual all-pairs correlation volumes of a center frame against its two
//! neighbours, with pooled pyramids and windowed lookups at the current
//! flow estimates.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;
use crate::trof::FlowPair;

/// Pyramid depth and window radius of a lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LookupWindowSpec {
    pub levels: usize,
    pub radius: usize,
}

impl LookupWindowSpec {
    /// Channels produced per direction: `levels · (2r+1)²`.
    pub fn channels(&self) -> usize {
        let side = 2 * self.radius + 1;
        self.levels * side * side
    }
}

/// `corr_prev[i,j,p,q] = scale_norm · ⟨feat_t[:,i,j], feat_{t−1}[:,p,q]⟩`,
/// likewise `corr_next` against `feat_{t+1}`. Each pyramid starts with the
/// full volume and halves the target dimensions per level.
#[derive(Clone, Debug)]
pub struct DualCorrelationVolume {
    pub corr_prev: Var,
    pub corr_next: Var,
    /// `[prev, next]` pyramids.
    pub pyramids: [Vec<Var>; 2],
    pub scale_norm: f64,
}

impl DualCorrelationVolume {
    pub fn levels(&self) -> usize {
        self.pyramids[0].len()
    }
}

pub fn build_dual_corr<T: Real>(
    g: &mut Graph<T>,
    feat_center: Var,
    feat_prev: Var,
    feat_next: Var,
    levels: usize,
    normalize: bool,
) -> Result<DualCorrelationVolume> {
    let shape = g.shape(feat_center).to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("features must be D×H×W, got {shape:?}"));
    }
    for v in [feat_prev, feat_next] {
        if g.shape(v) != shape.as_slice() {
            return Err(shape_err!("feature maps differ: {:?} vs {shape:?}", g.shape(v)));
        }
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("correlation pyramid needs at least one level".into()));
    }
    let scale_norm = if normalize { 1.0 / (shape[0] as f64).sqrt() } else { 1.0 };
    let corr_prev = g.correlation(feat_center, feat_prev, T::from_f64(scale_norm))?;
    let corr_next = g.correlation(feat_center, feat_next, T::from_f64(scale_norm))?;
    let mut pyramids = [vec![corr_prev], vec![corr_next]];
    for pyr in &mut pyramids {
        for _ in 1..levels {
            let last = *pyr.last().expect("non-empty pyramid");
            pyr.push(g.avg_pool2(last)?);
        }
    }
    Ok(DualCorrelationVolume { corr_prev, corr_next, pyramids, scale_norm })
}

/// Windowed multi-level lookup for both directions. Returns
/// `(c_prev, c_next)`, each `levels·(2r+1)² × H × W`, channels ordered
/// level-major then row-major over offsets.
pub fn lookup<T: Real>(
    g: &mut Graph<T>,
    vol: &DualCorrelationVolume,
    flows: &FlowPair,
    spec: LookupWindowSpec,
) -> Result<(Var, Var)> {
    if spec.levels == 0 || spec.levels > vol.levels() {
        return Err(Error::InvalidArgument(format!(
            "lookup asks for {} levels, volume has {}",
            spec.levels,
            vol.levels()
        )));
    }
    let mut out = [flows.prev; 2];
    for (dir, flow) in [flows.prev, flows.next].into_iter().enumerate() {
        let mut parts = Vec::with_capacity(spec.levels);
        for level in 0..spec.levels {
            let inv = 1.0 / (1u64 << level) as f64;
            parts.push(g.corr_lookup(vol.pyramids[dir][level], flow, spec.radius, inv)?);
        }
        out[dir] = if parts.len() == 1 { parts[0] } else { g.concat_channels(&parts)? };
    }
    Ok((out[0], out[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn flows_zero(g: &mut Graph<f64>, h: usize, w: usize) -> FlowPair {
        let z = g.constant(Tensor::zeros([2, h, w]));
        FlowPair { prev: z, next: z }
    }

    #[test]
    fn ones_features_give_d_or_sqrt_d() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::full([4, 2, 3], 1.0));
        let raw = build_dual_corr(&mut g, f, f, f, 1, false).unwrap();
        assert!(g.value(raw.corr_prev).data().iter().all(|&v| v == 4.0));
        let norm = build_dual_corr(&mut g, f, f, f, 1, true).unwrap();
        assert!(g.value(norm.corr_next).data().iter().all(|&v| v == 2.0));
        assert_eq!(norm.scale_norm, 0.5);
    }

    #[test]
    fn orthogonal_features_correlate_to_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::from_fn([2, 2, 2], |i| if i < 4 { 0.0 } else { 3.0 }));
        let v = build_dual_corr(&mut g, a, b, a, 1, true).unwrap();
        assert!(g.value(v.corr_prev).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_mismatched_features() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 2, 2]));
        let b = g.constant(Tensor::zeros([3, 2, 2]));
        assert!(build_dual_corr(&mut g, a, b, a, 1, true).is_err());
    }

    #[test]
    fn pyramid_levels_halve_targets() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn([3, 5, 4], |i| (i as f64).sin()));
        let v = build_dual_corr(&mut g, f, f, f, 3, true).unwrap();
        assert_eq!(g.shape(v.pyramids[0][1]), &[5, 4, 3, 2]);
        assert_eq!(g.shape(v.pyramids[1][2]), &[5, 4, 2, 1]);
    }

    #[test]
    fn zero_flow_radius_zero_reads_diagonal() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([3, 3, 4], |i| (i as f64 * 0.37).cos()));
        let b = g.constant(Tensor::from_fn([3, 3, 4], |i| (i as f64 * 0.11).sin()));
        let v = build_dual_corr(&mut g, a, b, b, 1, true).unwrap();
        let flows = flows_zero(&mut g, 3, 4);
        let (cp, _) = lookup(&mut g, &v, &flows, LookupWindowSpec { levels: 1, radius: 0 }).unwrap();
        let vol = g.value(v.corr_prev).clone();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g.value(cp).at(&[0, i, j]), vol.at(&[i, j, i, j]));
            }
        }
    }

    #[test]
    fn lookup_rejects_too_many_levels() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::full([2, 2, 2], 1.0));
        let v = build_dual_corr(&mut g, f, f, f, 1, true).unwrap();
        let flows = flows_zero(&mut g, 2, 2);
        assert!(lookup(&mut g, &v, &flows, LookupWindowSpec { levels: 2, radius: 1 }).is_err());
    }
}

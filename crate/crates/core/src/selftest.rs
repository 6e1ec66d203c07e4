//! Built-in finite-difference gradient suite, run by the `selftest`
//! subcommand and by the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corrvol::{self, LookupWindowSpec};
use crate::error::Result;
use crate::gradcheck::{project, random_tensor, GradCheck, GradReport};
use crate::graph::{Graph, Var};
use crate::model::{ModelConfig, VideoFlowNet};
use crate::mop::{videoflow_forward, warp_state};
use crate::tensor::Tensor;
use crate::trainer::{sequence_loss, FlowTarget};
use crate::trof::{self, FlowPair};

/// Aggregate result of one check over all seeds.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    pub max_err: f64,
}

type Case = fn(&GradCheck, u64) -> Result<GradReport>;

const CASES: &[(&str, Case)] = &[
    ("elementwise", elementwise),
    ("conv2d", conv2d),
    ("depthwise_conv2d", depthwise),
    ("bilinear_sample", bilinear),
    ("avg_pool2", avg_pool),
    ("instance_norm", instance_norm),
    ("correlation_build", correlation_build),
    ("correlation_lookup", correlation_lookup),
    ("warp_state", warp),
    ("encoders", encoders),
    ("updater", updater),
    ("sequence_loss_end_to_end", end_to_end),
];

/// Names of the checks run by [`gradient_suite`], in order.
pub fn gradient_checks() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(name, _)| *name)
}

/// Runs every gradient check once per seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(CASES.len());
    for &(name, case) in CASES {
        let mut agg = CheckOutcome { name, passed: true, checked: 0, failures: 0, max_err: 0.0 };
        for &seed in seeds {
            let check = GradCheck { seed, ..GradCheck::default() };
            let r = case(&check, seed)?;
            agg.passed &= r.passed();
            agg.checked += r.checked;
            agg.failures += r.failures;
            agg.max_err = agg.max_err.max(r.max_rel_err);
        }
        out.push(agg);
    }
    Ok(out)
}

/// Sampling coordinates whose fractional parts stay in `[0.2, 0.8]`, so a
/// probe of size `eps` never crosses a bilinear cell boundary.
fn off_grid(shape: &[usize], lo: i64, hi: i64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..=hi) as f64 + rng.random_range(0.2..=0.8))
}

fn sum_projections(g: &mut Graph<f64>, vars: &[Var], seed: u64) -> Result<Var> {
    let mut total = None;
    for (i, &v) in vars.iter().enumerate() {
        let p = project(g, v, seed.wrapping_add(i as u64 * 7919))?;
        total = Some(match total {
            Some(t) => g.add(t, p)?,
            None => p,
        });
    }
    Ok(total.expect("at least one output"))
}

fn elementwise(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[3, 2, 4], seed), random_tensor(&[2, 4], seed + 1), random_tensor(&[3], seed + 2)];
    check.run(&inputs, |g, v| {
        let s = g.sigmoid(v[0]);
        let t = g.tanh(v[0]);
        let r = g.relu(v[0]);
        let m = g.mul(s, v[1])?;
        let d = g.sub(t, v[1])?;
        let e = g.expand_spatial(v[2], 2, 4)?;
        let a = g.add(r, e)?;
        let cat = g.concat_channels(&[m, d, a])?;
        let sl = g.slice_channels(cat, 2, 5)?;
        let sc = g.scale(sl, 1.7);
        let zeros = g.constant(Tensor::zeros([5, 2, 4]));
        let l1 = g.l1_mean(sc, zeros)?;
        let p = project(g, sl, seed)?;
        g.add(l1, p)
    })
}

fn conv2d(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[2, 5, 5], seed), random_tensor(&[3, 2, 3, 3], seed + 1), random_tensor(&[3], seed + 2)];
    check.run(&inputs, |g, v| {
        let same = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let strided = g.conv2d(v[0], v[1], None, 2, 1)?;
        sum_projections(g, &[same, strided], seed)
    })
}

fn depthwise(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[3, 5, 4], seed), random_tensor(&[3, 3, 3], seed + 1), random_tensor(&[3], seed + 2)];
    check.run(&inputs, |g, v| {
        let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]))?;
        project(g, y, seed)
    })
}

fn bilinear(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[2, 4, 5], seed), off_grid(&[2, 3, 3], -1, 4, seed + 1)];
    check.run(&inputs, |g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        project(g, y, seed)
    })
}

fn avg_pool(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[2, 5, 4], seed)];
    check.run(&inputs, |g, v| {
        let y = g.avg_pool2(v[0])?;
        project(g, y, seed)
    })
}

fn instance_norm(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[3, 4, 3], seed)];
    check.run(&inputs, |g, v| {
        let y = g.instance_norm(v[0], 1e-5)?;
        project(g, y, seed)
    })
}

fn correlation_build(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let shape = [3, 3, 4];
    let inputs = [random_tensor(&shape, seed), random_tensor(&shape, seed + 1), random_tensor(&shape, seed + 2)];
    check.run(&inputs, |g, v| {
        let vol = corrvol::build_dual_corr(g, v[0], v[1], v[2], 2, true)?;
        let levels: Vec<Var> = vol.pyramids.iter().flatten().copied().collect();
        sum_projections(g, &levels, seed)
    })
}

fn correlation_lookup(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let shape = [3, 4, 4];
    let inputs = [
        random_tensor(&shape, seed),
        random_tensor(&shape, seed + 1),
        random_tensor(&shape, seed + 2),
        off_grid(&[2, 4, 4], -2, 1, seed + 3),
        off_grid(&[2, 4, 4], -2, 1, seed + 4),
    ];
    check.run(&inputs, |g, v| {
        let vol = corrvol::build_dual_corr(g, v[0], v[1], v[2], 2, true)?;
        let flows = FlowPair { prev: v[3], next: v[4] };
        let (a, b) = corrvol::lookup(g, &vol, &flows, LookupWindowSpec { levels: 2, radius: 1 })?;
        sum_projections(g, &[a, b], seed)
    })
}

fn warp(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let inputs = [random_tensor(&[3, 4, 4], seed), off_grid(&[2, 4, 4], -2, 1, seed + 1)];
    check.run(&inputs, |g, v| {
        let y = warp_state(g, v[0], v[1])?;
        project(g, y, seed)
    })
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        downsample: 2,
        feat_dim: 6,
        corr_dim: 6,
        flow_dim: 4,
        motion_dim: 4,
        hidden_dim: 4,
        corr_levels: 2,
        corr_radius: 1,
        ..ModelConfig::default()
    }
}

/// Runs `check` with the named parameters of `net` appended to `inputs`
/// and rebound inside the graph.
fn run_with_params<F>(
    check: &GradCheck,
    net: &VideoFlowNet<f64>,
    names: &[&str],
    mut inputs: Vec<Tensor<f64>>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &crate::nn::Bound, &[Var]) -> Result<Var>,
{
    let ids: Vec<_> = names.iter().map(|n| net.params.id(n).unwrap_or_else(|| panic!("no parameter {n}"))).collect();
    let first = inputs.len();
    inputs.extend(ids.iter().map(|&id| net.params.get(id).clone()));
    check.run(&inputs, |g, v| {
        let mut p = net.params.bind(g, false);
        for (&id, &var) in ids.iter().zip(&v[first..]) {
            p = p.with(id, var);
        }
        f(g, &p, &v[..first])
    })
}

fn encoders(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let net = VideoFlowNet::<f64>::new(tiny_config(), seed)?;
    let image = random_tensor(&[3, 6, 6], seed + 10);
    run_with_params(check, &net, &["fnet.down0.weight", "fnet.out.weight", "cnet.out.bias"], vec![image], |g, p, v| {
        let feat = net.trof.feature_encoder.forward(g, p, v[0])?;
        let ctx = net.trof.context_encoder.forward(g, p, v[0])?;
        sum_projections(g, &[feat, ctx], seed)
    })
}

fn updater(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let mut report = GradReport::default();
    for depthwise in [false, true] {
        let cfg = ModelConfig { depthwise_updater: depthwise, ..tiny_config() };
        let net = VideoFlowNet::<f64>::new(cfg, seed)?;
        let inputs = vec![
            random_tensor(&[4, 3, 3], seed + 20),
            random_tensor(&[4, 3, 3], seed + 21),
            random_tensor(&[4, 3, 3], seed + 22),
        ];
        let mut names = vec!["update.gates.weight", "update.cand.weight", "flow_head.1.weight"];
        if depthwise {
            names.push("update.mix_gates.weight");
        }
        let r = run_with_params(check, &net, &names, inputs, |g, p, v| {
            let (h, delta) = trof::update_step(g, &net.trof, p, v[0], v[1], v[2])?;
            sum_projections(g, &[h, delta.prev, delta.next], seed)
        })?;
        report.checked += r.checked;
        report.failures += r.failures;
        report.refined += r.refined;
        if r.max_rel_err >= report.max_rel_err {
            report.max_rel_err = r.max_rel_err;
            report.worst = r.worst;
        }
    }
    Ok(report)
}

fn end_to_end(check: &GradCheck, seed: u64) -> Result<GradReport> {
    let net = VideoFlowNet::<f64>::new(tiny_config(), seed)?;
    let frames = 4;
    let (h, w) = (4, 4);
    let mut inputs: Vec<Tensor<f64>> = (0..frames).map(|i| random_tensor(&[3, h, w], seed + 30 + i)).collect();
    for i in 0..2 * (frames - 2) {
        inputs.push(random_tensor(&[2, h, w], seed + 40 + i).map(|x| 3.0 * x));
    }
    let names = ["fnet.down0.weight", "corr_enc.0.weight", "mop.trunk.weight", "mop.initial_state", "flow_head.1.weight"];
    run_with_params(check, &net, &names, inputs, |g, p, v| {
        let frame_vars = &v[..frames as usize];
        let preds = videoflow_forward(g, &net, p, frame_vars, 2)?;
        let targets: Vec<FlowTarget> =
            v[frames as usize..].chunks(2).map(|c| FlowTarget { prev: c[0], next: c[1] }).collect();
        sequence_loss(g, &preds, &targets, 0.8, true)
    })
}

/// Exact checks that need no finite differences: correlation against a
/// brute-force loop, integer-flow lookup against direct indexing, the flow
/// file round trip and the metric truth tables.
pub fn oracle_suite() -> Result<Vec<CheckOutcome>> {
    let outcome = |name, max_err: f64, tol: f64| CheckOutcome { name, passed: max_err <= tol, checked: 1, failures: usize::from(max_err > tol), max_err };
    Ok(vec![
        outcome("correlation_brute_force", correlation_oracle()?, 1e-6),
        outcome("integer_lookup", lookup_oracle()?, 0.0),
        outcome("flo_round_trip", flo_oracle()?, 0.0),
        outcome("metric_truth_tables", metric_oracle()?, 0.0),
    ])
}

fn correlation_oracle() -> Result<f64> {
    let (d, h, w) = (8, 4, 4);
    let a = random_tensor(&[d, h, w], 101);
    let b = random_tensor(&[d, h, w], 102);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let vol = corrvol::build_dual_corr(&mut g, va, vb, vb, 1, true)?;
    let got = g.value(vol.corr_next);
    let mut worst = 0.0f64;
    for (i, j, p, q) in (0..h).flat_map(|i| (0..w).flat_map(move |j| (0..h).flat_map(move |p| (0..w).map(move |q| (i, j, p, q))))) {
        let dot: f64 = (0..d).map(|c| a.at(&[c, i, j]) * b.at(&[c, p, q])).sum();
        worst = worst.max((got.at(&[i, j, p, q]) - dot / (d as f64).sqrt()).abs());
    }
    Ok(worst)
}

fn lookup_oracle() -> Result<f64> {
    let (d, h, w, r) = (3, 4, 4, 1);
    let a = random_tensor(&[d, h, w], 201);
    let b = random_tensor(&[d, h, w], 202);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let vol = corrvol::build_dual_corr(&mut g, va, vb, vb, 1, false)?;
    let flow = Tensor::from_fn([2, h, w], |i| [1.0, -1.0, 0.0][i % 3]);
    let fv = g.constant(flow.clone());
    let (_, c_next) = corrvol::lookup(&mut g, &vol, &FlowPair { prev: fv, next: fv }, LookupWindowSpec { levels: 1, radius: r })?;
    let corr = g.value(vol.corr_next);
    let got = g.value(c_next);
    let side = 2 * r + 1;
    let mut worst = 0.0f64;
    for (y, x) in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
        for k in 0..side * side {
            let (dy, dx) = ((k / side) as f64 - r as f64, (k % side) as f64 - r as f64);
            let ty = (y as f64 + flow.at(&[1, y, x]) + dy).clamp(0.0, (h - 1) as f64) as usize;
            let tx = (x as f64 + flow.at(&[0, y, x]) + dx).clamp(0.0, (w - 1) as f64) as usize;
            worst = worst.max((got.at(&[k, y, x]) - corr.at(&[y, x, ty, tx])).abs());
        }
    }
    Ok(worst)
}

fn flo_oracle() -> Result<f64> {
    let src = random_tensor(&[2, 3, 5], 301);
    let flow = Tensor::<f32>::from_fn([2, 3, 5], |i| (src.data()[i] * 40.0) as f32);
    let back = crate::flowio::decode_flo(&crate::flowio::encode_flo(&flow)?)?;
    let same = back.shape() == flow.shape() && back.data().iter().zip(flow.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(if same { 0.0 } else { 1.0 })
}

fn metric_oracle() -> Result<f64> {
    use crate::flowio::{aepe, fl_all};
    let constant = |u: f32, v: f32| Tensor::from_fn([2, 2, 3], |i| if i < 6 { u } else { v });
    let cases = [
        (aepe(&constant(3.0, 4.0), &constant(0.0, 0.0), None)?, 5.0),
        (fl_all(&constant(14.0, 0.0), &constant(10.0, 0.0), None)?, 100.0),
        (fl_all(&constant(12.0, 0.0), &constant(10.0, 0.0), None)?, 0.0),
        (fl_all(&constant(104.0, 0.0), &constant(100.0, 0.0), None)?, 0.0),
    ];
    Ok(cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max))
}

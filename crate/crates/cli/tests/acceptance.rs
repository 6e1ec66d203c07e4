//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use triflow::config::RunConfig;
use triflow::corrvol::{build_dual_corr, lookup};
use triflow::flowio::{aepe, decode_flo, encode_flo, fl_all};
use triflow::gradcheck::random_tensor;
use triflow::infer::predict_clip;
use triflow::mop::warp_state;
use triflow::selftest::gradient_suite;
use triflow::trainer::{evaluate, sequence_loss, Checkpoint, EvalReport, FlowTarget, Trainer};
use triflow::{
    trof_forward, videoflow_forward, FlowPair, Graph, LookupWindowSpec, ModelConfig, Prediction, Tensor, VideoFlowNet,
};

const GRADIENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const CORRELATION_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-6;
const SMOKE_AEPE_THRESHOLD: f64 = 0.5;
const SMOKE_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Allowed `|bwd − fwd| / fwd` on the smoke checkpoint.
const PARITY_MARGIN: f64 = 0.25;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let outcomes = gradient_suite(&GRADIENT_SEEDS).map_err(err)?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    ensure(failed.is_empty(), format!("failing checks: {}", failed.join(", ")))?;
    ensure(elapsed < GRADIENT_BUDGET, format!("took {elapsed:.1?}"))?;
    let worst = outcomes.iter().map(|o| o.max_err).fold(0.0, f64::max);
    Ok(format!("{} ops × {} seeds, max rel err {worst:.2e}, {elapsed:.1?}", outcomes.len(), GRADIENT_SEEDS.len()))
}

fn correlation() -> Outcome {
    let (d, h, w) = (8, 4, 4);
    let (c, n) = (random_tensor(&[d, h, w], 11), random_tensor(&[d, h, w], 12));
    let mut g = Graph::<f64>::new();
    let (vc, vn) = (g.constant(c.clone()), g.constant(n.clone()));
    let vol = build_dual_corr(&mut g, vc, vn, vn, 1, true).map_err(err)?;
    let got = g.value(vol.corr_next);
    let mut worst = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            for p in 0..h {
                for q in 0..w {
                    let mut dot = 0.0;
                    for ch in 0..d {
                        dot += c.at(&[ch, i, j]) * n.at(&[ch, p, q]);
                    }
                    worst = worst.max((got.at(&[i, j, p, q]) - dot / (d as f64).sqrt()).abs());
                }
            }
        }
    }
    ensure(worst <= CORRELATION_TOL, format!("max abs err {worst:.2e}"))?;
    Ok(format!("max abs err {worst:.2e}"))
}

fn clamped_shift(state: &Tensor<f64>, u: i64, v: i64) -> Tensor<f64> {
    let [c, h, w] = [state.shape()[0], state.shape()[1], state.shape()[2]];
    Tensor::from_fn([c, h, w], |idx| {
        let (ch, y, x) = (idx / (h * w), idx % (h * w) / w, idx % w);
        state.at(&[ch, (y as i64 + v).clamp(0, h as i64 - 1) as usize, (x as i64 + u).clamp(0, w as i64 - 1) as usize])
    })
}

fn lookup_and_warp() -> Outcome {
    let (h, w, r) = (5, 6, 2);
    let (a, b) = (random_tensor(&[4, h, w], 21), random_tensor(&[4, h, w], 22));
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let vol = build_dual_corr(&mut g, va, vb, vb, 1, true).map_err(err)?;
    let flow = Tensor::from_fn([2, h, w], |i| [2.0, -1.0, 0.0, 3.0, -4.0][i % 5]);
    let fv = g.constant(flow.clone());
    let (_, c_next) =
        lookup(&mut g, &vol, &FlowPair { prev: fv, next: fv }, LookupWindowSpec { levels: 1, radius: r }).map_err(err)?;
    let side = 2 * r + 1;
    let mut lookups = 0;
    for (y, x) in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
        for k in 0..side * side {
            let ty = (y as i64 + flow.at(&[1, y, x]) as i64 + (k / side) as i64 - r as i64).clamp(0, h as i64 - 1);
            let tx = (x as i64 + flow.at(&[0, y, x]) as i64 + (k % side) as i64 - r as i64).clamp(0, w as i64 - 1);
            let want = g.value(vol.corr_next).at(&[y, x, ty as usize, tx as usize]);
            ensure(g.value(c_next).at(&[k, y, x]).to_bits() == want.to_bits(), format!("lookup differs at {k},{y},{x}"))?;
            lookups += 1;
        }
    }

    let state = random_tensor(&[3, h, w], 23);
    let s = g.constant(state.clone());
    let mut shifts = 0;
    for (u, v) in [(0, 0), (1, 0), (0, -2), (-3, 1), (7, -7)] {
        let f = g.constant(Tensor::from_fn([2, h, w], |i| if i < h * w { u as f64 } else { v as f64 }));
        let out = warp_state(&mut g, s, f).map_err(err)?;
        ensure(g.value(out).bit_identical(&clamped_shift(&state, u, v)), format!("warp by ({u}, {v}) differs"))?;
        shifts += 1;
    }
    Ok(format!("{lookups} lookups and {shifts} warps bit-identical, zero flow identity"))
}

fn small_model() -> ModelConfig {
    ModelConfig { feat_dim: 8, corr_dim: 8, flow_dim: 4, motion_dim: 6, hidden_dim: 6, corr_radius: 1, ..ModelConfig::default() }
}

fn random_frames(count: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..count)
        .map(|j| {
            let t = random_tensor(&[3, 16, 16], seed * 100 + j as u64);
            Tensor::from_fn([3, 16, 16], |i| (t.data()[i] + 1.0) / 2.0)
        })
        .collect()
}

fn flatten(g: &Graph<f64>, pred: &Prediction) -> Vec<Vec<f64>> {
    pred.image.iter().map(|f| g.value(f.prev).data().iter().chain(g.value(f.next).data()).copied().collect()).collect()
}

fn clip_flows(net: &VideoFlowNet<f64>, clip: &[Tensor<f64>], iters: usize) -> Result<Vec<Vec<Vec<f64>>>, String> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let vars: Vec<_> = clip.iter().map(|f| g.constant(f.clone())).collect();
    let preds = videoflow_forward(&mut g, net, &p, &vars, iters).map_err(err)?;
    Ok(preds.iter().map(|pred| flatten(&g, pred)).collect())
}

fn temporal_dependency() -> Outcome {
    let net = VideoFlowNet::<f64>::new(small_model(), 31).map_err(err)?;
    let clip = random_frames(7, 3);
    let t = 3;
    let base = clip_flows(&net, &clip, 3)?;
    let mut unchanged = 0;
    let mut changed = 0;
    for j in 0..7 {
        let mut perturbed = clip.clone();
        let noise = random_tensor(&[3, 16, 16], 700 + j as u64);
        perturbed[j] = Tensor::from_fn([3, 16, 16], |i| clip[j].data()[i] + 0.3 * noise.data()[i]);
        let out = clip_flows(&net, &perturbed, 3)?;
        for k in 1..=3 {
            let same = bit_equal(&base[t - 1][k - 1], &out[t - 1][k - 1]);
            if j.abs_diff(t) > k {
                ensure(same, format!("f^{k} at frame {t} moved under frame {j}"))?;
                unchanged += 1;
            } else if !same {
                changed += 1;
            }
        }
    }
    ensure(changed > 0, "no perturbation inside the receptive field changed a prediction")?;
    Ok(format!("{unchanged} outside pairs bit-identical, {changed} inside pairs changed"))
}

fn reductions() -> Outcome {
    let clip = random_frames(3, 4);
    let mut outputs = Vec::new();
    for mop in [true, false] {
        let mut cfg = small_model();
        cfg.ablation.mop = mop;
        let net = VideoFlowNet::<f64>::new(cfg, 41).map_err(err)?;
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let v: Vec<_> = clip.iter().map(|f| g.constant(f.clone())).collect();
        let video = videoflow_forward(&mut g, &net, &p, &v, 4).map_err(err)?;
        let single = trof_forward(&mut g, &net, &p, [v[0], v[1], v[2]], 4).map_err(err)?;
        let (a, b) = (flatten(&g, &video[0]), flatten(&g, &single));
        ensure(a.iter().zip(&b).all(|(x, y)| bit_equal(x, y)), format!("F=3 differs from the tri-frame pass (mop={mop})"))?;
        outputs.push(a);
    }
    ensure(outputs[0].iter().zip(&outputs[1]).all(|(x, y)| bit_equal(x, y)), "mop-off differs from the baseline")?;
    Ok("F=3 ≡ tri-frame pass, mop-off ≡ baseline, bitwise".into())
}

/// Plain-number loop over `Σ_k γ^{N−k} (mean|Δprev| + mean|Δnext|)`.
fn scalar_loss(preds: &[[Vec<f64>; 2]], gt: &[Vec<f64>; 2], gamma: f64) -> f64 {
    let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let n = preds.len();
    preds
        .iter()
        .enumerate()
        .map(|(k, p)| gamma.powi((n - 1 - k) as i32) * (mean_abs(&p[0], &gt[0]) + mean_abs(&p[1], &gt[1])))
        .sum()
}

fn loss() -> Outcome {
    let mut g = Graph::<f64>::new();
    let mut field = |v: f64| g.constant(Tensor::full([2, 2, 3], v));
    let gt = FlowTarget { prev: field(0.0), next: field(0.0) };
    let pred = Prediction {
        feature: vec![],
        image: vec![FlowPair { prev: field(1.0), next: field(-1.0) }, FlowPair { prev: field(0.5), next: field(-0.5) }],
    };
    let worked = sequence_loss(&mut g, &[pred], &[gt], 0.85, false).map_err(err)?;
    let worked = g.value(worked).item();
    ensure((worked - 2.7).abs() <= LOSS_TOL, format!("worked example gives {worked}"))?;

    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let iters = 1 + seed as usize;
        let gamma = 0.7 + 0.05 * seed as f64;
        let shape = [2, 3, 4];
        let tensors: Vec<Tensor<f64>> = (0..2 * iters + 2).map(|i| random_tensor(&shape, seed * 50 + i as u64)).collect();
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let gt = FlowTarget { prev: vars[0], next: vars[1] };
        let image = (0..iters).map(|k| FlowPair { prev: vars[2 + 2 * k], next: vars[3 + 2 * k] }).collect();
        let l = sequence_loss(&mut g, &[Prediction { feature: vec![], image }], &[gt], gamma, false).map_err(err)?;
        let plain: Vec<[Vec<f64>; 2]> =
            (0..iters).map(|k| [tensors[2 + 2 * k].data().to_vec(), tensors[3 + 2 * k].data().to_vec()]).collect();
        let want = scalar_loss(&plain, &[tensors[0].data().to_vec(), tensors[1].data().to_vec()], gamma);
        worst = worst.max((g.value(l).item() - want).abs());
    }
    ensure(worst <= LOSS_TOL, format!("max abs err {worst:.2e}"))?;
    Ok(format!("worked example {worked}, random cases max abs err {worst:.2e}"))
}

fn smoke_config() -> Result<RunConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf");
    let mut cfg = RunConfig::default();
    cfg.apply_file(&path).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

struct Smoke {
    checkpoint: Checkpoint,
    report: EvalReport,
    held_out: Vec<triflow::synthdata::SyntheticSequence>,
}

fn train_smoke() -> Result<(Smoke, Duration), String> {
    let start = Instant::now();
    let cfg = smoke_config()?;
    let train_set = cfg.data.train_set().map_err(err)?;
    let held_out = cfg.data.held_out_set().map_err(err)?;
    let mut trainer = Trainer::new(cfg.train.clone()).map_err(err)?;
    trainer.run(&train_set, |_| {}).map_err(err)?;
    let report = evaluate(&trainer.net, &held_out, cfg.train.iters, true).map_err(err)?;
    Ok((Smoke { checkpoint: trainer.checkpoint(), report, held_out }, start.elapsed()))
}

fn training_smoke(smoke: &Result<(Smoke, Duration), String>) -> Outcome {
    let (s, elapsed) = smoke.as_ref().map_err(Clone::clone)?;
    let fwd = s.report.forward.aepe;
    let summary = format!("held-out fwd AEPE {fwd:.4} (< {SMOKE_AEPE_THRESHOLD}), {:.0}s", elapsed.as_secs_f64());
    ensure(fwd < SMOKE_AEPE_THRESHOLD, summary.clone())?;
    ensure(*elapsed <= SMOKE_BUDGET, format!("over budget: {summary}"))?;
    Ok(summary)
}

fn parity(smoke: &Result<(Smoke, Duration), String>) -> Outcome {
    let (s, _) = smoke.as_ref().map_err(Clone::clone)?;
    let (fwd, bwd) = (s.report.forward.aepe, s.report.backward.aepe);
    let rev = s.report.backward_reversed.as_ref().map_or(f64::NAN, |r| r.aepe);
    let gap = (bwd - fwd).abs() / fwd;
    let summary = format!("fwd {fwd:.4} bwd {bwd:.4} bwd_rev {rev:.4}, relative gap {gap:.3} (≤ {PARITY_MARGIN})");
    ensure(gap <= PARITY_MARGIN, summary.clone())?;
    Ok(summary)
}

fn listing(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(root).unwrap_or(&p).to_path_buf(), bytes);
            }
        }
    }
    out
}

fn round_trips(smoke: &Result<(Smoke, Duration), String>) -> Outcome {
    let flow = Tensor::<f32>::from_fn([2, 7, 5], |i| (i as f32 * 0.731).sin() * 37.0);
    let back = decode_flo(&encode_flo(&flow).map_err(err)?).map_err(err)?;
    ensure(back.bit_identical(&flow), ".flo round trip differs")?;

    let (s, _) = smoke.as_ref().map_err(Clone::clone)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let path = tmp.path().join("checkpoint.bin");
    s.checkpoint.save(&path).map_err(err)?;
    let (before, after) = (s.checkpoint.model().map_err(err)?, Checkpoint::load(&path).map_err(err)?.model().map_err(err)?);
    let clip = &s.held_out[0].frames;
    let iters = s.checkpoint.config.iters;
    let (a, b) = (predict_clip(&before, clip, iters).map_err(err)?, predict_clip(&after, clip, iters).map_err(err)?);
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.prev.bit_identical(&y.prev) && x.next.bit_identical(&y.next));
    ensure(same, "reloaded checkpoint predicts different flows")?;

    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_triflow"))
            .args(["gen-data", "--seed", "3", "--set", "data.count=3", "--set", "data.width=32", "--set", "data.height=32"])
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(err)?;
        ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).into_owned())?;
        listings.push(listing(&out));
    }
    ensure(!listings[0].is_empty() && listings[0] == listings[1], "gen-data output differs between runs")?;
    Ok(format!(".flo, checkpoint and gen-data ({} files) identical", listings[0].len()))
}

fn metrics() -> Outcome {
    let constant = |u: f32| Tensor::from_fn([2, 3, 3], |i| if i < 9 { u } else { 0.0 });
    let pred = Tensor::from_fn([2, 3, 3], |i| if i < 9 { 3.0 } else { 4.0 });
    let cases = [
        ("aepe 3-4-5", aepe(&pred, &Tensor::zeros([2, 3, 3]), None).map_err(err)?, 5.0),
        ("fl_all 4 px at 10", fl_all(&constant(14.0), &constant(10.0), None).map_err(err)?, 100.0),
        ("fl_all 2 px", fl_all(&constant(12.0), &constant(10.0), None).map_err(err)?, 0.0),
        ("fl_all 4 px at 100", fl_all(&constant(104.0), &constant(100.0), None).map_err(err)?, 0.0),
    ];
    for (name, got, want) in cases {
        ensure(got == want, format!("{name}: got {got}, want {want}"))?;
    }
    Ok("aepe 5.0, fl_all 100/0/0, exact".into())
}

fn main() {
    let smoke = train_smoke();
    let criteria: [Criterion; 10] = [
        ("gradient suite", Box::new(gradients)),
        ("correlation oracle", Box::new(correlation)),
        ("lookup and warp oracles", Box::new(lookup_and_warp)),
        ("temporal dependency", Box::new(temporal_dependency)),
        ("reduction equivalences", Box::new(reductions)),
        ("loss oracle", Box::new(loss)),
        ("training smoke", Box::new(|| training_smoke(&smoke))),
        ("bi-directional parity", Box::new(|| parity(&smoke))),
        ("format round trips", Box::new(|| round_trips(&smoke))),
        ("metric unit tests", Box::new(metrics)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

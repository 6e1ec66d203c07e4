use triflow::infer::CenterFlow;
use triflow::synthdata::{make_dataset, SceneDistribution, SyntheticSequence};
use triflow::trainer::{
    ablate, evaluate, evaluate_with, sequence_loss, train, Checkpoint, FlowTarget, TrainConfig, Trainer,
};
use triflow::{Error, FlowPair, Graph, ModelConfig, Prediction, Tensor, VideoFlowNet};

fn tiny_model() -> ModelConfig {
    ModelConfig { feat_dim: 8, corr_dim: 8, flow_dim: 4, motion_dim: 6, hidden_dim: 6, corr_radius: 1, ..ModelConfig::default() }
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig { iters: 2, clip_frames: 4, steps, batch: 2, lr: 1e-3, model: tiny_model(), ..TrainConfig::default() }
}

fn tiny_data(count: usize, seed: u64) -> Vec<SyntheticSequence> {
    let dist = SceneDistribution {
        width: 16,
        height: 16,
        frames: 4,
        max_sprites: 1,
        max_translation: 2.0,
        max_background_translation: 1.0,
        ..SceneDistribution::default()
    };
    make_dataset(&dist, count, seed).unwrap()
}

fn param_bits(store: &triflow::nn::ParamStore<f32>) -> Vec<u32> {
    store.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn zero_steps_returns_the_initialization() {
    let cfg = tiny_config(0);
    let out = train(&cfg, &tiny_data(2, 1), |_| {}).unwrap();
    let init = VideoFlowNet::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(param_bits(&out.checkpoint.params), param_bits(&init.params));
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let data = tiny_data(3, 2);
    let cfg = tiny_config(4);
    let a = train(&cfg, &data, |_| {}).unwrap();
    let b = train(&cfg, &data, |_| {}).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
    assert_eq!(param_bits(&a.checkpoint.params), param_bits(&b.checkpoint.params));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = TrainConfig { lr: 0.0, final_lr: 0.0, weight_decay: 0.1, ..tiny_config(3) };
    let out = train(&cfg, &tiny_data(2, 3), |_| {}).unwrap();
    let init = VideoFlowNet::<f32>::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(out.losses.len(), 3);
    assert_eq!(param_bits(&out.checkpoint.params), param_bits(&init.params));
}

#[test]
fn non_finite_loss_aborts() {
    let mut data = tiny_data(1, 4);
    data[0].gt_fwd[0].data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { batch: 1, ..tiny_config(2) };
    match train(&cfg, &data, |_| {}) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 1"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on a NaN target succeeded"),
    }
}

#[test]
fn split_run_matches_single_run() {
    let data = tiny_data(2, 5);
    let cfg = tiny_config(4);
    let whole = train(&cfg, &data, |_| {}).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let mut losses = t.run_until(&data, 2, |_| {}).unwrap();
    losses.extend(t.run(&data, |_| {}).unwrap());
    assert_eq!(losses, whole.losses);
    assert_eq!(param_bits(&t.checkpoint().params), param_bits(&whole.checkpoint.params));
}

#[test]
fn log_lines_follow_the_contract() {
    let cfg = TrainConfig { log_every: 2, ..tiny_config(3) };
    let mut lines = Vec::new();
    train(&cfg, &tiny_data(2, 6), |s| lines.push(s.line())).unwrap();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("step=2 loss=") && lines[0].contains(" lr="), "{}", lines[0]);
    assert!(lines[1].starts_with("step=3 "));
}

#[test]
fn checkpoint_reload_gives_bit_identical_forward() {
    let data = tiny_data(2, 7);
    let out = train(&tiny_config(2), &data, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let a = triflow::infer::predict_clip(&out.checkpoint.model().unwrap(), &data[0].frames, 2).unwrap();
    let b = triflow::infer::predict_clip(&back.model().unwrap(), &data[0].frames, 2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.next.bit_identical(&y.next) && x.prev.bit_identical(&y.prev));
    }
}

#[test]
fn evaluation_is_deterministic() {
    let data = tiny_data(3, 8);
    let net = VideoFlowNet::<f32>::new(tiny_model(), 1).unwrap();
    let a = evaluate(&net, &data, 2, true).unwrap();
    let b = evaluate(&net, &data, 2, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_key_value(), b.to_key_value());
}

#[test]
fn oracle_predictor_scores_zero() {
    let data = tiny_data(3, 9);
    let lookup = |frames: &[Tensor<f32>]| {
        let seq = data.iter().find(|s| s.frames == frames).expect("known sequence");
        Ok((0..seq.centers())
            .map(|i| CenterFlow { frame: i + 1, prev: seq.gt_bwd[i].clone(), next: seq.gt_fwd[i].clone() })
            .collect())
    };
    let r = evaluate_with(&data, false, lookup).unwrap();
    for m in [&r.forward, &r.backward] {
        assert_eq!(m.aepe, 0.0);
        assert_eq!(m.fl_all, 0.0);
    }
}

#[test]
fn reversed_evaluation_reads_swapped_outputs() {
    // Predict the flows of the reversed sequence from the ground truth of
    // the original: reversed frame r is original frame last − r, and its
    // forward flow is the original backward flow.
    let data = tiny_data(2, 10);
    let predict = |frames: &[Tensor<f32>]| {
        let (seq, reversed) = data
            .iter()
            .find_map(|s| {
                if s.frames == frames {
                    Some((s, false))
                } else if s.frames.iter().rev().eq(frames.iter()) {
                    Some((s, true))
                } else {
                    None
                }
            })
            .expect("known sequence");
        let last = seq.frames.len() - 1;
        Ok((1..last)
            .map(|r| {
                let i = if reversed { last - r - 1 } else { r - 1 };
                let (prev, next) =
                    if reversed { (seq.gt_fwd[i].clone(), seq.gt_bwd[i].clone()) } else { (seq.gt_bwd[i].clone(), seq.gt_fwd[i].clone()) };
                CenterFlow { frame: r, prev, next }
            })
            .collect())
    };
    let r = evaluate_with(&data, true, predict).unwrap();
    assert_eq!(r.backward_reversed.unwrap().aepe, 0.0);
}

#[test]
fn ablation_produces_baseline_plus_three_rows() {
    let cfg = tiny_config(1);
    let data = tiny_data(2, 11);
    let table = ablate(&cfg, &data, &data, |_, _| {}).unwrap();
    let names: Vec<_> = table.rows.iter().map(|r| r.name).collect();
    assert_eq!(names, ["baseline", "bidirectional=off", "recurrent_fusion=off", "mop=off"]);
    let text = table.render();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().contains("+0.0000"));
}

fn constant(g: &mut Graph<f64>, value: f64) -> triflow::Var {
    g.constant(Tensor::full([2, 2, 3], value))
}

/// Independent loop over plain numbers.
fn scalar_loss(preds: &[Vec<[Vec<f64>; 2]>], gts: &[[Vec<f64>; 2]], gamma: f64) -> f64 {
    let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let mut total = 0.0;
    for (per_iter, gt) in preds.iter().zip(gts) {
        let n = per_iter.len();
        for (k, p) in per_iter.iter().enumerate() {
            let w = gamma.powi((n - 1 - k) as i32);
            total += w * (mean_abs(&gt[0], &p[0]) + mean_abs(&gt[1], &p[1]));
        }
    }
    total
}

#[test]
fn worked_loss_example() {
    let mut g = Graph::<f64>::new();
    let gt = FlowTarget { prev: constant(&mut g, 0.0), next: constant(&mut g, 0.0) };
    let first = FlowPair { prev: constant(&mut g, 1.0), next: constant(&mut g, -1.0) };
    let second = FlowPair { prev: constant(&mut g, 0.5), next: constant(&mut g, -0.5) };
    let pred = Prediction { feature: vec![], image: vec![first, second] };
    let loss = sequence_loss(&mut g, &[pred], &[gt], 0.85, false).unwrap();
    assert!((g.value(loss).item() - 2.7).abs() < 1e-12);
}

#[test]
fn loss_matches_scalar_loop() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let (centers, iters, n) = (3, 4, 2 * 2 * 3);
    let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>();
    let gts: Vec<[Vec<f64>; 2]> = (0..centers).map(|_| [rand_vec(&mut rng), rand_vec(&mut rng)]).collect();
    let preds: Vec<Vec<[Vec<f64>; 2]>> =
        (0..centers).map(|_| (0..iters).map(|_| [rand_vec(&mut rng), rand_vec(&mut rng)]).collect()).collect();
    let mut g = Graph::<f64>::new();
    let var = |g: &mut Graph<f64>, v: &[f64]| g.constant(Tensor::new([2, 2, 3], v.to_vec()).unwrap());
    let targets: Vec<FlowTarget> = gts.iter().map(|[p, n]| FlowTarget { prev: var(&mut g, p), next: var(&mut g, n) }).collect();
    let predictions: Vec<Prediction> = preds
        .iter()
        .map(|its| Prediction {
            feature: vec![],
            image: its.iter().map(|[p, n]| FlowPair { prev: var(&mut g, p), next: var(&mut g, n) }).collect(),
        })
        .collect();
    let loss = sequence_loss(&mut g, &predictions, &targets, 0.85, false).unwrap();
    assert!((g.value(loss).item() - scalar_loss(&preds, &gts, 0.85)).abs() < 1e-6);
}

#[test]
fn perfect_single_iteration_has_zero_loss() {
    let mut g = Graph::<f64>::new();
    let gt = FlowTarget { prev: constant(&mut g, 1.5), next: constant(&mut g, -2.0) };
    let pred = Prediction { feature: vec![], image: vec![FlowPair { prev: gt.prev, next: gt.next }] };
    let loss = sequence_loss(&mut g, &[pred], &[gt], 0.85, false).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

#[test]
fn later_iterations_weigh_one_over_gamma_more() {
    let gamma = 0.85;
    let mut g = Graph::<f64>::new();
    let gt = FlowTarget { prev: constant(&mut g, 0.0), next: constant(&mut g, 0.0) };
    let p0 = g.param(Tensor::from_fn([2, 2, 3], |i| i as f64 - 5.5));
    let p1 = g.param(Tensor::from_fn([2, 2, 3], |i| 2.0 * (i as f64 - 5.5)));
    let pred = Prediction { feature: vec![], image: vec![FlowPair { prev: p0, next: p0 }, FlowPair { prev: p1, next: p1 }] };
    let loss = sequence_loss(&mut g, &[pred], &[gt], gamma, false).unwrap();
    g.backward(loss).unwrap();
    let (g0, g1) = (g.grad(p0).unwrap(), g.grad(p1).unwrap());
    for (a, b) in g0.data().iter().zip(g1.data()) {
        assert_eq!(a.signum(), b.signum());
        assert!((b / a - 1.0 / gamma).abs() < 1e-12);
    }
}

#[test]
fn including_the_initial_term_adds_the_zero_flow_error() {
    let mut g = Graph::<f64>::new();
    let gt = FlowTarget { prev: constant(&mut g, 2.0), next: constant(&mut g, -1.0) };
    let pred = Prediction { feature: vec![], image: vec![FlowPair { prev: gt.prev, next: gt.next }] };
    let without = sequence_loss(&mut g, std::slice::from_ref(&pred), &[gt], 0.5, false).unwrap();
    let with = sequence_loss(&mut g, &[pred], &[gt], 0.5, true).unwrap();
    assert_eq!(g.value(without).item(), 0.0);
    assert!((g.value(with).item() - 0.5 * 3.0).abs() < 1e-12);
}

#[test]
fn mismatched_counts_are_rejected() {
    let mut g = Graph::<f64>::new();
    let gt = FlowTarget { prev: constant(&mut g, 0.0), next: constant(&mut g, 0.0) };
    let pred = Prediction { feature: vec![], image: vec![FlowPair { prev: gt.prev, next: gt.next }] };
    assert!(sequence_loss(&mut g, &[pred], &[gt, gt], 0.85, false).is_err());
    assert!(sequence_loss(&mut g, &[], &[], 0.85, false).is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn loss_is_one_homogeneous(values in prop::collection::vec(-10.0f64..10.0, 4 * 12), scale in 0.1f64..8.0) {
            let build = |g: &mut Graph<f64>, s: f64| {
                let mut t = |i: usize| g.constant(Tensor::new([2, 2, 3], values[12 * i..12 * (i + 1)].iter().map(|v| v * s).collect()).unwrap());
                let gt = FlowTarget { prev: t(0), next: t(1) };
                let pred = Prediction { feature: vec![], image: vec![FlowPair { prev: t(2), next: t(3) }] };
                let l = sequence_loss(g, &[pred], &[gt], 0.85, false).unwrap();
                g.value(l).item()
            };
            let mut g = Graph::new();
            let base = build(&mut g, 1.0);
            let scaled = build(&mut g, scale);
            prop_assert!((scaled - scale * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }
    }
}

//! Loss, optimizer and training-loop contracts, plus the CV harness on a toy
//! panel.

mod common;

use common::{small_config, synth_panel, synth_split};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tft_retail::ingest::{build_windows, PanelTable, ScalerSet};
use tft_retail::synth::{generate_records, SynthConfig};
use tft_retail::tensor::{Graph, ParamStore, Tensor};
use tft_retail::tft::{load_checkpoint, save_checkpoint, Checkpoint, TftModel};
use tft_retail::train::{
    inner_split, pinball, quantile_loss, run_cv, train_model, Adam, CvConfig, EarlyStopping,
    PlateauScheduler, TrainConfig, TrainError,
};

fn loss_of(pred: &[f64], target: &[f64], quantiles: &[f64]) -> f64 {
    let n = target.len();
    let q = quantiles.len();
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(vec![1, n, q], pred.to_vec()).unwrap()).unwrap();
    let t = g.constant(Tensor::new(vec![1, n], target.to_vec()).unwrap()).unwrap();
    let l = quantile_loss(&mut g, p, t, quantiles).unwrap();
    g.value(l).data()[0]
}

#[test]
fn pinball_analytic_cases() {
    assert_eq!(loss_of(&[0.0], &[10.0], &[0.9]), 9.0);
    assert_eq!(loss_of(&[20.0], &[10.0], &[0.5]), 5.0);
    assert_eq!(loss_of(&[20.0], &[10.0], &[0.75]), 2.5);
    // (0.9 − 1)·(−10) rounds to one ulp below 1
    assert!((loss_of(&[20.0], &[10.0], &[0.9]) - 1.0).abs() < 1e-15);
    assert_eq!(pinball(0.5, -4.0), 2.0);
    // mean over the two points and three quantiles
    let l = loss_of(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[2.0, -2.0], &[0.25, 0.5, 0.75]);
    assert_eq!(l, (0.5 + 1.0 + 1.5 + 1.5 + 1.0 + 0.5) / 6.0);
    let same = [3.0, 3.0, 3.0, -1.0, -1.0, -1.0];
    assert_eq!(loss_of(&same, &[3.0, -1.0], &[0.1, 0.5, 0.9]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn median_component_is_half_the_mae(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..20)
    ) {
        let (pred, target): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mae = pred.iter().zip(&target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
        let l = loss_of(&pred, &target, &[0.5]);
        prop_assert!((l - mae / 2.0).abs() <= 1e-12 * (1.0 + mae));
    }

    #[test]
    fn quantile_loss_is_convex_and_nonnegative(
        a in prop::collection::vec(-50.0f64..50.0, 6),
        b in prop::collection::vec(-50.0f64..50.0, 6),
        target in prop::collection::vec(-50.0f64..50.0, 2),
        lambda in 0.0f64..1.0,
    ) {
        let qs = [0.1, 0.5, 0.9];
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let (la, lb, lm) = (loss_of(&a, &target, &qs), loss_of(&b, &target, &qs), loss_of(&mix, &target, &qs));
        prop_assert!(la >= 0.0 && lb >= 0.0);
        prop_assert!(lm <= lambda * la + (1.0 - lambda) * lb + 1e-9);
    }
}

fn theta_store(v: f64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.add("theta", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
    p
}

#[test]
fn adam_matches_a_scalar_trace_on_a_parabola() {
    // independent reference for f(θ) = θ², θ₀ = 1
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for t in 1..=10 {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th -= lr * mh / (vh.sqrt() + eps);
        trace.push(th);
    }

    let mut p = theta_store(1.0);
    let id = p.id("theta").unwrap();
    let mut adam = Adam::new(&p, None);
    for expected in trace {
        let mut g = Graph::new();
        let x = g.param(&p, id).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let mut grads = g.backward(loss).unwrap().param_grads(&p);
        adam.step(&mut p, &mut grads, lr);
        let got = p.get(id).data()[0];
        assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    }
    assert_eq!(adam.steps(), 10);
}

#[test]
fn adam_zero_gradient_and_constant_gradient_limits() {
    let mut p = theta_store(0.5);
    let id = p.id("theta").unwrap();
    let mut adam = Adam::new(&p, Some(1.0));
    let mut g = Graph::new();
    let x = g.param(&p, id).unwrap();
    let zero = g.scale(x, 0.0).unwrap();
    let loss = g.sum_all(zero).unwrap();
    let mut grads = g.backward(loss).unwrap().param_grads(&p);
    adam.step(&mut p, &mut grads, 0.1);
    assert_eq!(p.get(id).data()[0], 0.5);
    assert_eq!(adam.steps(), 1);

    // a linear loss has a constant gradient: steps approach lr in size
    let mut prev = p.get(id).data()[0];
    for _ in 0..200 {
        let mut g = Graph::new();
        let x = g.param(&p, id).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let loss = g.sum_all(lin).unwrap();
        let mut grads = g.backward(loss).unwrap().param_grads(&p);
        let stats = adam.step(&mut p, &mut grads, 0.01);
        assert!(stats.post_clip_norm <= 1.0 + 1e-12);
        let now = p.get(id).data()[0];
        assert!(now < prev);
        prev = now;
    }
    let mut g = Graph::new();
    let x = g.param(&p, id).unwrap();
    let lin = g.scale(x, 3.0).unwrap();
    let loss = g.sum_all(lin).unwrap();
    let mut grads = g.backward(loss).unwrap().param_grads(&p);
    adam.step(&mut p, &mut grads, 0.01);
    let step = prev - p.get(id).data()[0];
    assert!((step - 0.01).abs() < 1e-3, "step {step}");
}

#[test]
fn scheduler_and_stopper_count_strict_improvements() {
    let mut s = PlateauScheduler::new(0.01, 0.5, 5);
    assert_eq!(s.observe(1.0), 0.01);
    for _ in 0..4 {
        assert_eq!(s.observe(1.0), 0.01);
    }
    assert_eq!(s.observe(1.0), 0.005);
    assert_eq!(s.observe(0.5), 0.005);

    let mut e = EarlyStopping::new(10);
    assert_eq!(e.observe(0, 1.0), (true, false));
    assert_eq!(e.observe(1, 0.9), (true, false));
    for epoch in 2..11 {
        assert_eq!(e.observe(epoch, 0.9), (false, false));
    }
    assert_eq!(e.observe(11, 0.95), (false, true));
    assert_eq!(e.best_epoch(), Some(1));
}

#[test]
fn inner_split_purges_shared_target_weeks() {
    let split = synth_split(3, 143);
    let (train, val) = inner_split(&split.train_windows, 0.1);
    assert!(!val.is_empty());
    for store in 0..3 {
        let first_val = val
            .iter()
            .filter(|s| s.store_index == store)
            .map(|s| s.origin_t)
            .min()
            .unwrap();
        for s in train.iter().filter(|s| s.store_index == store) {
            assert!(s.origin_t + 5 < first_val + 1);
        }
        // ⌈58 · 0.1⌉ = 6 validation origins per store
        assert_eq!(val.iter().filter(|s| s.store_index == store).count(), 6);
    }
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        TrainConfig { plateau_patience: 0, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }
    assert!(TrainConfig::default().validate().is_ok());
}

fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn toy_run_records_history_and_checkpoints() {
    // 10 stores × 57 weeks: one window each
    let panel = synth_panel(10, 57);
    let scalers = ScalerSet::fit(&panel).unwrap();
    let windows = build_windows(&panel, &scalers, 52, 5).unwrap();
    assert_eq!(windows.len(), 10);
    let cfg = small_config(10);
    let mut seen = Vec::new();
    let (model, hist) =
        train_model::<f64>(&windows, &cfg, &toy_train_config(2), &mut |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(hist.epochs(), 2);
    assert_eq!(hist.val_loss.len(), 2);
    assert_eq!(hist.lr.len(), 2);
    assert_eq!(hist.seconds.len(), 2);
    assert_eq!(hist.to_csv().lines().count(), 3);
    let best = hist
        .val_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(hist.best_epoch, best);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        model: model.clone(),
        scalers,
        stores: panel.stores().to_vec(),
    };
    save_checkpoint(dir.path(), &ckpt).unwrap();
    let back: Checkpoint<f64> = load_checkpoint(dir.path()).unwrap();
    let a = model.predict_all(&windows.samples, 8).unwrap();
    let b = back.model.predict_all(&windows.samples, 8).unwrap();
    assert_eq!(a.quantiles, b.quantiles);
}

#[test]
fn training_is_deterministic_clipped_and_stops_early() {
    let split = synth_split(3, 100);
    let cfg = small_config(3);
    let tc = TrainConfig {
        early_stop_patience: 2,
        ..toy_train_config(6)
    };
    let (m1, h1) = train_model::<f32>(&split.train_windows, &cfg, &tc, &mut |_| {}).unwrap();
    let (m2, h2) = train_model::<f32>(&split.train_windows, &cfg, &tc, &mut |_| {}).unwrap();
    assert_eq!(h1.train_loss, h2.train_loss);
    assert_eq!(h1.val_loss, h2.val_loss);
    for ((_, _, a), (_, _, b)) in m1.params.iter().zip(m2.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert!(h1.max_grad_norm.iter().all(|&n| n <= 1.0 + 1e-6));
    assert!(h1.epochs() <= h1.best_epoch + 1 + tc.early_stop_patience);
    assert!(h1.train_loss.iter().chain(&h1.val_loss).all(|v| v.is_finite()));
}

#[test]
fn empty_windows_are_rejected() {
    let split = synth_split(2, 100);
    let empty = split.train_windows.subset(|_| false);
    let r = train_model::<f32>(&empty, &small_config(2), &toy_train_config(1), &mut |_| {});
    assert!(matches!(r, Err(TrainError::NoWindows)));
}

#[test]
fn too_many_stores_for_the_embedding_is_an_error() {
    let panel = synth_panel(3, 143);
    let r = run_cv::<f32>(
        &panel,
        &CvConfig { folds: 2, ..CvConfig::default() },
        &small_config(2),
        &toy_train_config(1),
        &|_, _| {},
    );
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn cv_report_aggregates_and_ignores_input_order() {
    let records = generate_records(&SynthConfig {
        stores: 3,
        weeks: 143,
        ..SynthConfig::default()
    });
    let mut shuffled = records.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let cv = CvConfig { folds: 2, ..CvConfig::default() };
    let run = |recs: Vec<_>| {
        let panel = PanelTable::from_records(recs).unwrap();
        run_cv::<f32>(&panel, &cv, &small_config(3), &toy_train_config(1), &|_, _| {}).unwrap()
    };
    let report = run(records);
    assert_eq!(report.folds.len(), 2);
    let r2: Vec<f64> = report.folds.iter().map(|f| f.metrics.r2).collect();
    let mean = (r2[0] + r2[1]) / 2.0;
    assert!((report.r2.mean - mean).abs() <= 1e-12);
    let sd = ((r2[0] - mean).powi(2) + (r2[1] - mean).powi(2)).sqrt();
    assert!((report.r2.sd - sd).abs() <= 1e-12);
    // two fold rows plus the header and the aggregate row
    assert_eq!(report.to_csv().lines().count(), 4);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 2);

    let again = run(shuffled);
    for (a, b) in report.folds.iter().zip(&again.folds) {
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn models_start_from_the_seed() {
    let a = TftModel::<f64>::new(small_config(2), 1).unwrap();
    let b = TftModel::<f64>::new(small_config(2), 1).unwrap();
    let c = TftModel::<f64>::new(small_config(2), 2).unwrap();
    let same = |x: &TftModel<f64>, y: &TftModel<f64>| {
        x.params.iter().zip(y.params.iter()).all(|(p, q)| p.2.data() == q.2.data())
    };
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

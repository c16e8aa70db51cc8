//! Acceptance run: one `PASS`/`FAIL` line per criterion at its stated
//! tolerance, then a summary.
//!
//! Criterion 1 needs the reference Walmart CSV (`WALMART_CSV`, or
//! `data/Walmart.csv` under the workspace root). Criteria 3 to 6 use that
//! file when present and otherwise the deterministic synthetic panel, marked
//! `[synthetic stand-in]`. The run exits 0 whatever the verdicts; the lines
//! are the result.

mod common;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tft_retail::baselines::{
    compare_models, train_baseline, BaselineConfig, BaselineKind, PointForecasts,
};
use tft_retail::evalx::{compute_metrics, interval_coverage, variable_importance};
use tft_retail::ingest::{
    build_windows, cv_folds, descriptive_stats, holdout_protocol, parse_csv, MinMax, PanelTable,
    ScalerSet, WindowSample, ZScore,
};
use tft_retail::nn::{Lstm, LstmState};
use tft_retail::synth::{generate_panel, SynthConfig};
use tft_retail::tensor::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor, Var};
use tft_retail::tft::{
    load_checkpoint, predict_intervals, save_checkpoint, Checkpoint, Mode, TftConfig, TftModel,
};
use tft_retail::train::{
    forecast_windows, quantile_loss, run_cv, train_model, Adam, CvConfig, TrainConfig,
};

type Verdict = Result<String, String>;

struct Report {
    lines: Vec<(usize, bool)>,
}

impl Report {
    fn record(&mut self, id: usize, title: &str, started: Instant, verdict: Verdict) {
        let secs = started.elapsed().as_secs_f64();
        let (ok, detail) = match verdict {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let line = format!(
            "{} criterion {id}: {title}: {detail} ({secs:.1}s)\n",
            if ok { "PASS" } else { "FAIL" }
        );
        let mut out = std::io::stdout();
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
        self.lines.push((id, ok));
    }
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn progress(msg: &str) {
    let _ = writeln!(std::io::stderr(), "  .. {msg}");
}

fn reference_csv() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("WALMART_CSV") {
        return Some(PathBuf::from(p));
    }
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/Walmart.csv");
    p.exists().then_some(p)
}

// ---------------------------------------------------------------- criterion 1

/// Printed cells, column order Store, Sales, Holiday, Temp, FP, CPI, UEMP,
/// with the number of decimals each cell is printed at.
const TABLE: [(&str, [(f64, i32); 7]); 8] = [
    ("count", [(6435.0, 0), (6435.0, 0), (6435.0, 0), (6435.0, 0), (6435.0, 0), (6435.0, 0), (6435.0, 0)]),
    ("mean", [(23.0, 0), (1046964.8, 1), (0.07, 2), (60.66, 2), (3.36, 2), (171.58, 2), (8.00, 2)]),
    ("sd", [(12.9, 1), (564366.6, 1), (0.26, 2), (18.44, 2), (0.46, 2), (39.36, 2), (1.88, 2)]),
    ("min", [(1.0, 0), (209986.2, 1), (0.00, 2), (-2.06, 2), (2.47, 2), (126.06, 2), (3.88, 2)]),
    ("25%", [(12.0, 0), (553350.1, 1), (0.00, 2), (47.46, 2), (2.93, 2), (131.74, 2), (6.89, 2)]),
    ("50%", [(23.0, 0), (960746.0, 1), (0.00, 2), (62.67, 2), (3.44, 2), (182.62, 2), (7.87, 2)]),
    ("75%", [(34.0, 0), (1420158.7, 1), (0.00, 2), (74.94, 2), (3.73, 2), (212.74, 2), (8.62, 2)]),
    ("max", [(45.0, 0), (3818686.5, 1), (1.00, 2), (100.14, 2), (4.47, 2), (227.23, 2), (14.31, 2)]),
];

fn criterion_1() -> Verdict {
    let Some(path) = reference_csv() else {
        return Err("reference CSV not available (set WALMART_CSV or place data/Walmart.csv)".into());
    };
    let started = Instant::now();
    let panel = parse_csv(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let stats = descriptive_stats(&panel).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let mut mismatches = Vec::new();
    let mut cells = 0;
    for (row, values) in TABLE {
        for (col, &(printed, decimals)) in values.iter().enumerate() {
            let s = &stats.columns[col].1;
            let got = match row {
                "count" => s.count as f64,
                "mean" => s.mean,
                "sd" => s.sd,
                "min" => s.min,
                "25%" => s.q25,
                "50%" => s.q50,
                "75%" => s.q75,
                _ => s.max,
            };
            let scale = 10f64.powi(decimals);
            cells += 1;
            // the table truncates some cells (Store sd 12.988 prints as 12.9)
            let close = |v: f64| (v / scale - printed).abs() <= 1e-9 * printed.abs().max(1.0);
            if !close((got * scale).round()) && !close((got * scale).trunc()) {
                mismatches.push(format!("{}/{row}: {got} vs {printed}", stats.columns[col].0));
            }
        }
    }
    let fast = elapsed < Duration::from_secs(5);
    check(
        mismatches.is_empty() && fast,
        format!(
            "{}/{cells} cells match at printed precision, parse+stats {:.2}s{}",
            cells - mismatches.len(),
            elapsed.as_secs_f64(),
            if mismatches.is_empty() { String::new() } else { format!("; {}", mismatches.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let split = common::synth_split(2, 100);
    let config = TftConfig {
        n_static_categories: 2,
        ..TftConfig::default()
    };
    let mut model = TftModel::<f64>::new(config, 13).map_err(|e| e.to_string())?;
    // move off the zero-bias initialisation, where constant inputs give
    // LayerNorm exactly constant rows
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let window = split.train_windows.samples[3].clone();
    let n_tensors = model.params.len();
    let cfg = GradCheckConfig {
        samples: n_tensors.max(200),
        eps: 1e-5,
        tol: 1e-4,
        seed: 7,
    };
    let as_tensor_err = |e: tft_retail::tft::TftError| tft_retail::tensor::TensorError::InvalidArgument {
        op: "tft",
        detail: e.to_string(),
    };
    let result = grad_check(
        &model.params,
        |g: &mut Graph<f64>, p: &ParamStore<f64>| -> tft_retail::tensor::Result<Var> {
            let mut m = model.clone();
            m.params = p.clone();
            let inputs = m.batch_inputs(&[&window]).map_err(as_tensor_err)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let vars = m.forward_graph(g, &inputs, Mode::Eval, &mut rng).map_err(as_tensor_err)?;
            let target = g.constant(inputs.target)?;
            g.pinball_loss(vars.quantiles, target, &m.config.quantiles)
        },
        &cfg,
    );
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(r) => check(
            r.checked >= 200 && r.params_covered == n_tensors && secs < 300.0,
            format!(
                "{} coordinates over {}/{} tensors of the default model, max rel error {:.2e}",
                r.checked, r.params_covered, n_tensors, r.max_rel_error
            ),
        ),
        Err(e) => Err(e.to_string()),
    }
}

// ------------------------------------------------------- criteria 3, 4 and 6

struct HoldoutRun {
    label: &'static str,
    r2: f64,
    smape: f64,
    coverage: f64,
    train_secs: f64,
    epochs: usize,
    best_epoch: usize,
    split: tft_retail::ingest::HoldoutSplit,
    tft: PointForecasts,
}

fn evaluation_panel() -> Result<(PanelTable, &'static str), String> {
    match reference_csv() {
        Some(p) => parse_csv(&p)
            .map(|panel| (panel, "[reference data]"))
            .map_err(|e| format!("{}: {e}", p.display())),
        None => generate_panel(&SynthConfig::default())
            .map(|panel| (panel, "[synthetic stand-in]"))
            .map_err(|e| e.to_string()),
    }
}

fn holdout_run(panel: &PanelTable, label: &'static str) -> Result<HoldoutRun, String> {
    let split = holdout_protocol(panel, 0.8, 52, 5).map_err(|e| e.to_string())?;
    let cfg = TftConfig {
        n_static_categories: panel.stores().len(),
        ..TftConfig::default()
    };
    let tc = TrainConfig::default();
    let started = Instant::now();
    let (model, hist) = train_model::<f32>(&split.train_windows, &cfg, &tc, &mut |r| {
        progress(&format!("hold-out epoch {} train {:.5} val {:.5}", r.epoch, r.train_loss, r.val_loss))
    })
    .map_err(|e| e.to_string())?;
    let train_secs = started.elapsed().as_secs_f64();
    let (fc, _) = forecast_windows(&model, &split.test_windows, &split.scalers).map_err(|e| e.to_string())?;
    let actual = fc.actuals().ok_or("hold-out forecasts lack actuals")?;
    let m = compute_metrics(&fc.median(), &actual).map_err(|e| e.to_string())?;
    let cal = interval_coverage(&fc, 0.9).map_err(|e| e.to_string())?;
    Ok(HoldoutRun {
        label,
        r2: m.r2,
        smape: m.smape,
        coverage: cal.coverage,
        train_secs,
        epochs: hist.epochs(),
        best_epoch: hist.best_epoch + 1,
        tft: PointForecasts::from_quantiles("TFT", &fc),
        split,
    })
}

fn criterion_3(run: &HoldoutRun) -> Verdict {
    check(
        run.r2 >= 0.95 && run.smape <= 8.0 && run.train_secs <= 1800.0,
        format!(
            "R2 {:.4} (>= 0.95), SMAPE {:.2}% (<= 8%), training {:.0}s, best epoch {} of {} {}",
            run.r2, run.smape, run.train_secs, run.best_epoch, run.epochs, run.label
        ),
    )
}

fn criterion_4(run: &HoldoutRun) -> Verdict {
    check(
        (0.85..=0.95).contains(&run.coverage),
        format!("[q10, q90] coverage {:.4} (in [0.85, 0.95]) {}", run.coverage, run.label),
    )
}

fn criterion_6(run: &HoldoutRun) -> Verdict {
    let split = &run.split;
    let tc = TrainConfig::default();
    let mut models = vec![run.tft.clone()];
    for kind in BaselineKind::ALL {
        let (m, _) = train_baseline::<f32>(&split.train_windows, &BaselineConfig::new(kind), &tc, &mut |r| {
            progress(&format!("{} epoch {} val {:.5}", kind.label(), r.epoch, r.val_loss))
        })
        .map_err(|e| e.to_string())?;
        let values = m.predict(&split.test_windows, &split.scalers).map_err(|e| e.to_string())?;
        models.push(
            PointForecasts::from_windows(kind.label(), &split.test_windows, &values).map_err(|e| e.to_string())?,
        );
    }
    let table = compare_models(&split.test_windows, &models).map_err(|e| e.to_string())?;
    let tft = table.row("TFT").ok_or("no TFT row")?.metrics.rmse;
    let mut ok = true;
    let mut parts = vec![format!("TFT RMSE {tft:.0}")];
    for kind in BaselineKind::ALL {
        let other = table.row(kind.label()).ok_or("missing baseline row")?.metrics.rmse;
        let margin = 1.0 - tft / other;
        ok &= margin >= 0.20;
        parts.push(format!("{} {other:.0} ({:+.1}%)", kind.label(), 100.0 * margin));
    }
    check(ok, format!("{}; need >= +20% each {}", parts.join(", "), run.label))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5(panel: &PanelTable, label: &str) -> Verdict {
    let cfg = TftConfig {
        n_static_categories: panel.stores().len(),
        ..TftConfig::default()
    };
    let report = run_cv::<f32>(panel, &CvConfig::default(), &cfg, &TrainConfig::default(), &|fold, r| {
        progress(&format!("cv fold {fold} epoch {} val {:.5}", r.epoch, r.val_loss))
    })
    .map_err(|e| e.to_string())?;
    let r2: Vec<String> = report.folds.iter().map(|f| format!("{:.4}", f.metrics.r2)).collect();
    let min = report.folds.iter().map(|f| f.metrics.r2).fold(f64::INFINITY, f64::min);
    check(
        report.folds.len() == 5 && report.r2.sd <= 0.015 && min >= 0.93,
        format!(
            "fold R2 [{}], mean {:.4} sd {:.4} (sd <= 0.015, each >= 0.93) {label}",
            r2.join(", "),
            report.r2.mean,
            report.r2.sd
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Verdict {
    let mut failures = Vec::new();
    let mut fail = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // normalisation of attention and selection weights
    let panel = common::synth_panel(45, 143);
    let split = holdout_protocol(&panel, 0.8, 52, 5).map_err(|e| e.to_string())?;
    let model = TftModel::<f64>::new(TftConfig::default(), 3).map_err(|e| e.to_string())?;
    let batch: Vec<WindowSample> = split.test_windows.samples.iter().step_by(40).cloned().collect();
    let out = model.predict_all(&batch, 16).map_err(|e| e.to_string())?;
    let rows_sum_to_one = |data: &[f64], width: usize| {
        data.chunks(width).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6 && r.iter().all(|&w| w >= 0.0))
    };
    fail("attention rows", rows_sum_to_one(&out.attention, 57));
    fail("encoder selection", rows_sum_to_one(&out.encoder_weights, out.n_encoder_vars));
    fail("decoder selection", rows_sum_to_one(&out.decoder_weights, out.n_decoder_vars));
    let imp = variable_importance(std::slice::from_ref(&out));
    fail(
        "importance",
        [&imp.encoder, &imp.decoder]
            .iter()
            .all(|side| (side.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-6),
    );

    // quantiles never cross once repaired
    let fc = predict_intervals(&out, &batch, &model.config.quantiles, &split.scalers).map_err(|e| e.to_string())?;
    fail("non-crossing", fc.rows.iter().all(|r| r.values.windows(2).all(|p| p[0] <= p[1])));

    // scalers round-trip
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = ZScore { mean: 171.58, sd: 39.36 };
    let mm = MinMax { min: 12.25, max: 15.15 };
    let round_trip = (0..1000).all(|_| {
        let v: f64 = rng.random_range(-1e6..1e6);
        (z.inverse(z.apply(v)) - v).abs() <= 1e-9 * v.abs().max(1.0)
            && (mm.inverse(mm.apply(v)) - v).abs() <= 1e-9 * v.abs().max(1.0)
    });
    fail("scaler round-trip", round_trip);

    // leakage over every fold
    let folds = cv_folds(&panel, 5, 52, 5, 0.6).map_err(|e| e.to_string())?;
    let leak_free = folds.iter().all(|f| {
        let b = &f.test_weeks;
        f.train_rows.rows().iter().all(|r| r.t_idx < b.start)
            && f.train.samples.iter().all(|s| s.origin_t + 5 < b.start)
            && f.test.samples.iter().all(|s| s.origin_t + 1 >= b.start && s.origin_t + 5 < b.end)
    });
    let holdout_clean = split.train_windows.samples.iter().all(|s| s.origin_t + 5 < 114)
        && split.test_windows.samples.iter().all(|s| s.origin_t + 1 >= 114);
    fail("leakage", leak_free && holdout_clean);

    // window census
    let scalers = ScalerSet::fit(&panel).map_err(|e| e.to_string())?;
    fail("census 3915", build_windows(&panel, &scalers, 52, 5).map(|w| w.len()).ok() == Some(3915));

    // rmse >= mae and SMAPE symmetry
    let mut metric_ok = true;
    for _ in 0..500 {
        let n = rng.random_range(2..50);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1e6)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1e6)).collect();
        let (m1, m2) = match (compute_metrics(&p, &a), compute_metrics(&a, &p)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => continue,
        };
        metric_ok &= m1.rmse >= m1.mae * (1.0 - 1e-12);
        metric_ok &= (m1.smape - m2.smape).abs() <= 1e-9 * (1.0 + m1.smape);
    }
    fail("metric identities", metric_ok);

    // fp64 checkpoint round-trip, bitwise
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = Checkpoint {
        model: model.clone(),
        scalers: split.scalers.clone(),
        stores: panel.stores().to_vec(),
    };
    save_checkpoint(dir.path(), &ckpt).map_err(|e| e.to_string())?;
    let back: Checkpoint<f64> = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    let bitwise = model.params.iter().zip(back.model.params.iter()).all(|(a, b)| {
        a.1 == b.1 && a.2.data().iter().zip(b.2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    fail("checkpoint bitwise", bitwise && back.scalers == split.scalers);

    // determinism under a fixed seed
    let small = common::synth_split(3, 100);
    let tc = TrainConfig {
        max_epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || train_model::<f32>(&small.train_windows, &common::small_config(3), &tc, &mut |_| {});
    match (run(), run()) {
        (Ok((m1, h1)), Ok((m2, h2))) => fail(
            "determinism",
            h1.train_loss == h2.train_loss
                && h1.val_loss == h2.val_loss
                && m1.params.iter().zip(m2.params.iter()).all(|(a, b)| a.2.data() == b.2.data()),
        ),
        _ => fail("determinism", false),
    }

    check(
        failures.is_empty(),
        if failures.is_empty() {
            "normalisation, non-crossing, scaler round-trip, leakage, census 3915, metric identities, \
             fp64 checkpoint, determinism"
                .into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut randn = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };

    // LSTM against a scalar step oracle
    let (input, hidden, steps) = (3, 4, 9);
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(2);
    let lstm = Lstm::new(&mut store, "lstm", input, hidden, &mut init_rng).map_err(|e| e.to_string())?;
    let bias_id = store.id("lstm.bias").ok_or("no lstm.bias")?;
    store.get_mut(bias_id).data_mut().copy_from_slice(&randn(4 * hidden));
    let get = |n: &str| store.get(store.id(n).unwrap()).data().to_vec();
    let (w_ih, w_hh, b) = (get("lstm.w_ih"), get("lstm.w_hh"), get("lstm.bias"));
    let xs = randn(steps * input);
    let (mut h, mut c) = (randn(hidden), randn(hidden));
    let (h0, c0) = (h.clone(), c.clone());
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut expected = Vec::new();
    for t in 0..steps {
        let x = &xs[t * input..(t + 1) * input];
        let pre = |gate: usize, u: usize, h: &[f64]| {
            let col = gate * hidden + u;
            let mut z = b[col];
            for (i, xi) in x.iter().enumerate() {
                z += xi * w_ih[i * 4 * hidden + col];
            }
            for (j, hj) in h.iter().enumerate() {
                z += hj * w_hh[j * 4 * hidden + col];
            }
            z
        };
        let (mut nh, mut nc) = (vec![0.0; hidden], vec![0.0; hidden]);
        for u in 0..hidden {
            let (i, f) = (sigmoid(pre(0, u, &h)), sigmoid(pre(1, u, &h)));
            let (gg, o) = (pre(2, u, &h).tanh(), sigmoid(pre(3, u, &h)));
            nc[u] = f * c[u] + i * gg;
            nh[u] = o * nc[u].tanh();
        }
        h = nh;
        c = nc;
        expected.extend_from_slice(&h);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, steps, input], xs.clone()).unwrap()).unwrap();
    let state = LstmState {
        h: g.constant(Tensor::new(vec![1, hidden], h0).unwrap()).unwrap(),
        c: g.constant(Tensor::new(vec![1, hidden], c0).unwrap()).unwrap(),
    };
    let (seq, _) = lstm.forward(&mut g, &store, x, state).map_err(|e| e.to_string())?;
    let lstm_diff = g.value(seq).data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // matmul against a triple loop
    let (m, k, n) = (7, 5, 6);
    let (a, bm) = (randn(m * k), randn(k * n));
    let mut g = Graph::<f64>::new();
    let va = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap()).unwrap();
    let vb = g.constant(Tensor::new(vec![k, n], bm.clone()).unwrap()).unwrap();
    let vc = g.matmul(va, vb).map_err(|e| e.to_string())?;
    let mut mm_diff: f64 = 0.0;
    for i in 0..m {
        for j in 0..n {
            let oracle: f64 = (0..k).map(|p| a[i * k + p] * bm[p * n + j]).sum();
            mm_diff = mm_diff.max((g.value(vc).data()[i * n + j] - oracle).abs());
        }
    }

    // Adam against a scalar trace on θ², θ₀ = 1, lr 0.01
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let (mut th, mut mo, mut ve) = (1.0f64, 0.0, 0.0);
    let mut p = ParamStore::<f64>::new();
    let id = p.add("theta", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
    let mut adam = Adam::new(&p, None);
    let mut adam_diff: f64 = 0.0;
    for t in 1..=10 {
        let gr = 2.0 * th;
        mo = b1 * mo + (1.0 - b1) * gr;
        ve = b2 * ve + (1.0 - b2) * gr * gr;
        th -= lr * (mo / (1.0 - b1.powi(t))) / ((ve / (1.0 - b2.powi(t))).sqrt() + eps);

        let mut g = Graph::new();
        let x = g.param(&p, id).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let mut grads = g.backward(loss).unwrap().param_grads(&p);
        adam.step(&mut p, &mut grads, lr);
        adam_diff = adam_diff.max((p.get(id).data()[0] - th).abs());
    }

    // pinball analytic cases
    let loss = |pred: &[f64], target: &[f64], qs: &[f64]| {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new(vec![1, target.len(), qs.len()], pred.to_vec()).unwrap()).unwrap();
        let tv = g.constant(Tensor::new(vec![1, target.len()], target.to_vec()).unwrap()).unwrap();
        let l = quantile_loss(&mut g, pv, tv, qs).unwrap();
        g.value(l).data()[0]
    };
    let pinball_exact = loss(&[0.0], &[10.0], &[0.9]) == 9.0
        && loss(&[20.0], &[10.0], &[0.5]) == 5.0
        && loss(&[3.0, 3.0, 3.0], &[3.0], &[0.1, 0.5, 0.9]) == 0.0
        && loss(&[0.0; 6], &[2.0, -2.0], &[0.25, 0.5, 0.75]) == 1.0;

    check(
        lstm_diff < 1e-12 && mm_diff < 1e-12 && adam_diff <= 1e-12 && pinball_exact,
        format!(
            "LSTM max diff {lstm_diff:.1e}, matmul {mm_diff:.1e}, Adam {adam_diff:.1e}, pinball cases {}",
            if pinball_exact { "exact" } else { "WRONG" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Verdict {
    let stores = 20;
    let panel = PanelTable::from_records(common::one_covariate_records(stores, 143, 17)).map_err(|e| e.to_string())?;
    let split = holdout_protocol(&panel, 0.8, 52, 5).map_err(|e| e.to_string())?;
    let cfg = TftConfig {
        hidden_size: 16,
        attention_heads: 4,
        dropout: 0.1,
        n_static_categories: stores as usize,
        ..TftConfig::default()
    };
    let tc = TrainConfig {
        max_epochs: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    let (model, _) = train_model::<f32>(&split.train_windows, &cfg, &tc, &mut |r| {
        progress(&format!("one-covariate epoch {} val {:.5}", r.epoch, r.val_loss))
    })
    .map_err(|e| e.to_string())?;
    let out = model.predict_all(&split.test_windows.samples, 64).map_err(|e| e.to_string())?;
    let ranking = variable_importance(&[out]).encoder_ranking();
    let top: Vec<String> = ranking.iter().take(3).map(|(n, w)| format!("{n} {w:.3}")).collect();
    check(
        ranking[0].0 == "temperature",
        format!("encoder importance ranking: {} (driver: temperature)", top.join(", ")),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a filter that
    // names another test skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    // ACCEPTANCE_ONLY=2,7,8 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut report = Report { lines: Vec::new() };

    if wanted(1) {
        let t = Instant::now();
        report.record(1, "descriptive statistics table", t, criterion_1());
    }
    if wanted(2) {
        let t = Instant::now();
        report.record(2, "full-model fp64 gradient check", t, criterion_2());
    }
    if wanted(7) {
        let t = Instant::now();
        report.record(7, "invariant suite", t, criterion_7());
    }
    if wanted(8) {
        let t = Instant::now();
        report.record(8, "oracle equivalence", t, criterion_8());
    }
    if wanted(9) {
        let t = Instant::now();
        report.record(9, "one-covariate interpretability", t, criterion_9());
    }
    if !(wanted(3) || wanted(4) || wanted(5) || wanted(6)) {
        return summary(report);
    }

    match evaluation_panel() {
        Ok((panel, label)) => {
            let t = Instant::now();
            match holdout_run(&panel, label) {
                Ok(run) => {
                    report.record(3, "hold-out accuracy band", t, criterion_3(&run));
                    let t = Instant::now();
                    report.record(4, "interval calibration", t, criterion_4(&run));
                    let t = Instant::now();
                    report.record(6, "ordering against baselines", t, criterion_6(&run));
                }
                Err(e) => {
                    for (id, title) in [(3, "hold-out accuracy band"), (4, "interval calibration"), (6, "ordering against baselines")] {
                        report.record(id, title, t, Err(e.clone()));
                    }
                }
            }
            let t = Instant::now();
            report.record(5, "cross-validation stability", t, criterion_5(&panel, label));
        }
        Err(e) => {
            for (id, title) in [
                (3, "hold-out accuracy band"),
                (4, "interval calibration"),
                (5, "cross-validation stability"),
                (6, "ordering against baselines"),
            ] {
                report.record(id, title, Instant::now(), Err(e.clone()));
            }
        }
    }

    summary(report);
}

fn summary(mut report: Report) {
    report.lines.sort();
    let passed = report.lines.iter().filter(|(_, ok)| *ok).count();
    let failed: Vec<String> = report.lines.iter().filter(|(_, ok)| !ok).map(|(id, _)| id.to_string()).collect();
    println!(
        "acceptance: {passed}/{} criteria PASS{}",
        report.lines.len(),
        if failed.is_empty() { String::new() } else { format!("; FAIL: {}", failed.join(", ")) }
    );
}

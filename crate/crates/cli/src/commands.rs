use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::{json, Value};
use tft_retail::baselines::{
    compare_models, read_external_forecasts, train_baseline, BaselineConfig, BaselineKind,
    PointForecasts,
};
use tft_retail::evalx::{
    attention_by_lag, attention_csv, compute_metrics, interval_coverage, residual_diagnostics,
    variable_importance,
};
use tft_retail::ingest::{
    correlation_matrix, descriptive_stats, forecast_window, holdout_protocol, holdout_windows, parse_csv, write_csv,
    IngestError, PanelTable, WindowSet,
};
use tft_retail::synth::{generate_records, SynthConfig};
use tft_retail::tensor::Scalar;
use tft_retail::tft::{
    checkpoint_dtype, load_checkpoint, predict_intervals, save_checkpoint, Checkpoint,
    QuantileForecast,
};
use tft_retail::train::{forecast_windows, run_cv, train_model, EpochRecord};

use crate::config::{parse_file, Settings};
use crate::Common;

/// Invalid command-line usage; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn settings(common: &Common, max_epochs: Option<usize>, folds: Option<usize>) -> Result<Settings> {
    let map = match &common.config {
        Some(p) => parse_file(p).map_err(|e| usage(format!("{e:#}")))?,
        None => BTreeMap::new(),
    };
    let mut s = Settings::from_map(&map).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(t) = common.threads {
        s.threads = t;
    }
    if let Some(e) = max_epochs {
        s.train.max_epochs = e;
    }
    if let Some(k) = folds {
        s.cv.folds = k;
    }
    let s = s.finish().map_err(|e| usage(format!("{e:#}")))?;
    // an already-initialised pool keeps its size
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(s.threads)
        .build_global();
    Ok(s)
}

fn load_panel(common: &Common) -> Result<PanelTable> {
    let path = common
        .data
        .as_ref()
        .ok_or_else(|| usage("--data <path> is required"))?;
    parse_csv(path).with_context(|| format!("loading {}", path.display()))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    Ok(common.out.clone())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_run_json(dir: &Path, command: &str, common: &Common, settings: &Settings, extra: Value) -> Result<()> {
    let run = json!({
        "command": command,
        "data": common.data.as_ref().map(|p| p.display().to_string()),
        "out": common.out.display().to_string(),
        "config_file": common.config.as_ref().map(|p| p.display().to_string()),
        "settings": settings.to_json(),
        "options": extra,
    });
    write(dir, "run.json", serde_json::to_string_pretty(&run)?)
}

fn progress(label: &str) -> impl Fn(&EpochRecord) + Sync + '_ {
    move |r: &EpochRecord| {
        eprintln!(
            "[{label}] epoch {:>3}: train {:.6} val {:.6} lr {:.2e} ({:.1}s)",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        )
    }
}

pub fn stats(common: &Common) -> Result<()> {
    let s = settings(common, None, None)?;
    let panel = load_panel(common)?;
    let table = descriptive_stats(&panel)?;
    let dir = out_dir(common)?;
    let csv = table.to_csv();
    write(&dir, "stats.csv", &csv)?;
    write(&dir, "correlation.csv", correlation_matrix(&panel)?.to_csv())?;
    write_run_json(&dir, "stats", common, &s, json!({}))?;
    print!("{csv}");
    Ok(())
}

/// `store,origin_t,horizon,actual,predicted,residual` for the median forecast.
fn scatter_csv(fc: &QuantileForecast) -> String {
    let mid = fc.levels.len() / 2;
    let mut out = String::from("store,origin_t,horizon,actual,predicted,residual\n");
    for r in &fc.rows {
        if let Some(a) = r.actual {
            let p = r.values[mid];
            let _ = writeln!(out, "{},{},{},{a:?},{p:?},{:?}", r.store, r.origin_t, r.horizon, a - p);
        }
    }
    out
}

pub fn train(common: &Common, max_epochs: Option<usize>) -> Result<()> {
    let mut s = settings(common, max_epochs, None)?;
    let panel = load_panel(common)?;
    s.tft.n_static_categories = panel.stores().len();
    let dir = out_dir(common)?;
    write_run_json(&dir, "train", common, &s, json!({ "max_epochs": max_epochs }))?;

    let split = holdout_protocol(&panel, s.train_fraction, s.tft.encoder_len, s.tft.horizon)?;
    eprintln!(
        "{} training windows, {} hold-out windows",
        split.train_windows.len(),
        split.test_windows.len()
    );
    let observer = progress("tft");
    let (model, history) = train_model::<f32>(&split.train_windows, &s.tft, &s.train, &mut |r| observer(r))?;
    let (fc, _) = forecast_windows(&model, &split.test_windows, &split.scalers)?;
    save_checkpoint(
        &dir.join("checkpoint"),
        &Checkpoint {
            model,
            scalers: split.scalers.clone(),
            stores: panel.stores().to_vec(),
        },
    )?;

    let actual = fc.actuals().context("hold-out forecasts lack actuals")?;
    let metrics = compute_metrics(&fc.median(), &actual)?;
    let calibration = interval_coverage(&fc, 0.9)?;

    let mut order: Vec<usize> = (0..fc.rows.len()).collect();
    let week = |i: usize| fc.rows[i].origin_t as usize + fc.rows[i].horizon;
    order.sort_by_key(|&i| (week(i), fc.rows[i].store, fc.rows[i].horizon));
    let median = fc.median();
    let pred: Vec<f64> = order.iter().map(|&i| median[i]).collect();
    let act: Vec<f64> = order.iter().map(|&i| actual[i]).collect();
    let residuals = residual_diagnostics(&pred, &act)?;
    let mut resid_csv = String::from("week,store,origin_t,horizon,residual\n");
    for (k, &i) in order.iter().enumerate() {
        let r = &fc.rows[i];
        let _ = writeln!(
            resid_csv,
            "{},{},{},{},{:?}",
            week(i),
            r.store,
            r.origin_t,
            r.horizon,
            residuals.residuals[k]
        );
    }

    write(&dir, "history.csv", history.to_csv())?;
    write(&dir, "metrics.json", metrics.to_json())?;
    write(&dir, "calibration.csv", calibration.to_csv())?;
    write(&dir, "holdout_forecasts.csv", fc.to_csv_with_actual())?;
    write(&dir, "scatter.csv", scatter_csv(&fc))?;
    write(&dir, "residuals.csv", resid_csv)?;
    write(
        &dir,
        "residual_summary.json",
        serde_json::to_string_pretty(&json!({
            "n": residuals.residuals.len(),
            "mean": residuals.mean,
            "sd": residuals.sd,
            "lag1_autocorr": residuals.lag1_autocorr,
        }))?,
    )?;
    println!(
        "hold-out: RMSE {:.2}  MAE {:.2}  R2 {:.4}  SMAPE {:.2}%  coverage {:.3}  (best epoch {} of {})",
        metrics.rmse,
        metrics.mae,
        metrics.r2,
        metrics.smape,
        calibration.coverage,
        history.best_epoch + 1,
        history.epochs()
    );
    Ok(())
}

pub fn cv(common: &Common, folds: Option<usize>, max_epochs: Option<usize>) -> Result<()> {
    let mut s = settings(common, max_epochs, folds)?;
    let panel = load_panel(common)?;
    s.tft.n_static_categories = panel.stores().len();
    let dir = out_dir(common)?;
    write_run_json(&dir, "cv", common, &s, json!({ "folds": s.cv.folds, "max_epochs": max_epochs }))?;
    let observer = |fold: usize, r: &EpochRecord| progress(&format!("fold {fold}"))(r);
    let report = run_cv::<f32>(&panel, &s.cv, &s.tft, &s.train, &observer)?;
    for f in &report.folds {
        write(&dir, &format!("cv_fold{}_history.csv", f.index), f.history.to_csv())?;
    }
    let csv = report.to_csv();
    write(&dir, "cv.csv", &csv)?;
    write(&dir, "cv.json", report.to_json())?;
    print!("{csv}");
    Ok(())
}

fn checkpoint_index(ckpt_stores: &[u32], store: u32) -> Result<usize> {
    ckpt_stores
        .iter()
        .position(|&s| s == store)
        .ok_or_else(|| IngestError::UnknownStore(store).into())
}

fn remap_to_checkpoint(windows: &mut WindowSet, ckpt_stores: &[u32]) -> Result<()> {
    for w in &mut windows.samples {
        w.store_index = checkpoint_index(ckpt_stores, w.store)?;
    }
    Ok(())
}

fn forecast_with<T: Scalar>(common: &Common, checkpoint: &Path, store: u32, origin: Option<u32>) -> Result<()> {
    let s = settings(common, None, None)?;
    let ckpt = load_checkpoint::<T>(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let panel = load_panel(common)?;
    let si = panel.require_store(store)?;
    let ci = checkpoint_index(&ckpt.stores, store)?;
    let rows = panel.store_rows(si);
    let origin = origin.unwrap_or_else(|| rows.last().expect("non-empty store").t_idx);
    let c = &ckpt.model.config;
    let mut window = forecast_window(&panel, &ckpt.scalers, si, origin, c.encoder_len, c.horizon)?;
    window.store_index = ci;
    let output = ckpt.model.predict(&[&window])?;
    let fc = predict_intervals(&output, std::slice::from_ref(&window), &c.quantiles, &ckpt.scalers)?;
    for r in &fc.rows {
        if r.values.windows(2).any(|w| w[0] > w[1]) {
            bail!("quantile crossing survived repair at horizon {}", r.horizon);
        }
    }

    let dir = out_dir(common)?;
    write_run_json(
        &dir,
        "forecast",
        common,
        &s,
        json!({ "checkpoint": checkpoint.display().to_string(), "store": store, "origin": origin }),
    )?;
    let mut hist = String::from("store,t_idx,date,weekly_sales\n");
    let end = rows.iter().position(|r| r.t_idx == origin).expect("origin validated");
    for r in &rows[end + 1 - c.encoder_len..=end] {
        let _ = writeln!(hist, "{},{},{},{:?}", store, r.t_idx, r.record.date, r.record.weekly_sales);
    }
    let csv = fc.to_csv();
    write(&dir, "forecast.csv", &csv)?;
    write(&dir, "forecast_history.csv", hist)?;
    print!("{csv}");
    Ok(())
}

pub fn forecast(common: &Common, checkpoint: &Path, store: u32, origin: Option<u32>) -> Result<()> {
    match checkpoint_dtype(checkpoint)?.as_str() {
        "f64" => forecast_with::<f64>(common, checkpoint, store, origin),
        _ => forecast_with::<f32>(common, checkpoint, store, origin),
    }
}

fn explain_with<T: Scalar>(common: &Common, checkpoint: &Path) -> Result<()> {
    let s = settings(common, None, None)?;
    let ckpt = load_checkpoint::<T>(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let panel = load_panel(common)?;
    let c = &ckpt.model.config;
    let (_, mut test) = holdout_windows(&panel, s.train_fraction, c.encoder_len, c.horizon, &ckpt.scalers)?;
    remap_to_checkpoint(&mut test, &ckpt.stores)?;
    let output = ckpt.model.predict_all(&test.samples, 64)?;
    let lags = attention_by_lag(std::slice::from_ref(&output));
    let importance = variable_importance(std::slice::from_ref(&output));
    for (side, list) in [("encoder", &importance.encoder), ("decoder", &importance.decoder)] {
        let total: f64 = list.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-6 {
            bail!("{side} importance sums to {total}, expected 1");
        }
    }
    let fc = predict_intervals(&output, &test.samples, &c.quantiles, &ckpt.scalers)?;
    let mut by_store: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (r, m) in fc.rows.iter().zip(fc.median()) {
        let e = by_store.entry(r.store).or_default();
        e.0 += m;
        e.1 += 1;
    }
    let mut ranking: Vec<(u32, f64)> = by_store.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut rank_csv = String::from("rank,store,mean_prediction\n");
    for (i, (store, mean)) in ranking.iter().enumerate() {
        let _ = writeln!(rank_csv, "{},{store},{mean:?}", i + 1);
    }

    let dir = out_dir(common)?;
    write_run_json(&dir, "explain", common, &s, json!({ "checkpoint": checkpoint.display().to_string() }))?;
    write(&dir, "attention.csv", attention_csv(&lags))?;
    write(&dir, "importance.csv", importance.to_csv())?;
    write(&dir, "store_ranking.csv", rank_csv)?;
    println!("encoder variable importance:");
    for (name, w) in importance.encoder_ranking() {
        println!("  {name:<14} {w:.4}");
    }
    Ok(())
}

pub fn explain(common: &Common, checkpoint: &Path) -> Result<()> {
    match checkpoint_dtype(checkpoint)?.as_str() {
        "f64" => explain_with::<f64>(common, checkpoint),
        _ => explain_with::<f32>(common, checkpoint),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Entry {
    Tft,
    Baseline(BaselineKind),
}

fn parse_kinds(kinds: &[String]) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for k in kinds.iter().map(|k| k.trim()).filter(|k| !k.is_empty()) {
        match k.to_ascii_lowercase().as_str() {
            "all" => {
                out.extend(BaselineKind::ALL.iter().map(|&b| Entry::Baseline(b)));
                out.push(Entry::Tft);
            }
            "tft" => out.push(Entry::Tft),
            other => out.push(Entry::Baseline(
                other.parse().map_err(|e: tft_retail::baselines::BaselineError| usage(e.to_string()))?,
            )),
        }
    }
    Ok(out)
}

pub fn compare(common: &Common, kinds: &[String], external: &[PathBuf], max_epochs: Option<usize>) -> Result<()> {
    let mut s = settings(common, max_epochs, None)?;
    let entries = parse_kinds(kinds)?;
    let mut names: Vec<String> = external
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        })
        .collect();
    names.extend(entries.iter().map(|e| match e {
        Entry::Tft => "TFT".to_string(),
        Entry::Baseline(b) => b.label().to_string(),
    }));
    if names.is_empty() {
        return Err(usage("nothing to compare: pass --kinds and/or --external"));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(usage(format!("model name {n:?} appears more than once")));
        }
    }

    let panel = load_panel(common)?;
    s.tft.n_static_categories = panel.stores().len();
    let dir = out_dir(common)?;
    write_run_json(
        &dir,
        "compare",
        common,
        &s,
        json!({
            "models": names,
            "external": external.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "max_epochs": max_epochs,
        }),
    )?;
    let split = holdout_protocol(&panel, s.train_fraction, s.tft.encoder_len, s.tft.horizon)?;

    let mut forecasts: Vec<PointForecasts> = external
        .iter()
        .zip(&names)
        .map(|(p, n)| read_external_forecasts(p, n.clone()))
        .collect::<std::result::Result<_, _>>()?;
    let run_one = |e: &Entry| -> Result<PointForecasts> {
        match *e {
            Entry::Tft => {
                let observer = progress("TFT");
                let (model, _) = train_model::<f32>(&split.train_windows, &s.tft, &s.train, &mut |r| observer(r))?;
                let (fc, _) = forecast_windows(&model, &split.test_windows, &split.scalers)?;
                Ok(PointForecasts::from_quantiles("TFT", &fc))
            }
            Entry::Baseline(kind) => {
                let mut cfg = BaselineConfig::new(kind);
                cfg.encoder_len = s.tft.encoder_len;
                cfg.horizon = s.tft.horizon;
                cfg.n_features = s.tft.n_encoder_vars;
                let observer = progress(kind.label());
                let (model, _) = train_baseline::<f32>(&split.train_windows, &cfg, &s.train, &mut |r| observer(r))?;
                let values = model.predict(&split.test_windows, &split.scalers)?;
                Ok(PointForecasts::from_windows(kind.label(), &split.test_windows, &values)?)
            }
        }
    };
    let internal: Vec<Result<PointForecasts>> = if s.threads > 1 {
        entries.par_iter().map(run_one).collect()
    } else {
        entries.iter().map(run_one).collect()
    };
    for f in internal {
        forecasts.push(f?);
    }
    let table = compare_models(&split.test_windows, &forecasts)?;
    let csv = table.to_csv();
    write(&dir, "comparison.csv", &csv)?;
    write(&dir, "comparison.json", table.to_json())?;
    print!("{csv}");
    Ok(())
}

pub fn synth(common: &Common, stores: u32, weeks: usize) -> Result<()> {
    let s = settings(common, None, None)?;
    let cfg = SynthConfig {
        stores,
        weeks,
        seed: common.seed.unwrap_or(SynthConfig::default().seed),
        ..SynthConfig::default()
    };
    let records = generate_records(&cfg);
    let dir = out_dir(common)?;
    let path = dir.join("synthetic.csv");
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(&records, file)?;
    write_run_json(&dir, "synth", common, &s, json!({ "stores": stores, "weeks": weeks, "seed": cfg.seed }))?;
    println!("wrote {} rows to {}", records.len(), path.display());
    Ok(())
}

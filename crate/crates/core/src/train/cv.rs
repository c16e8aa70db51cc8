use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use super::{derive_seed, forecast_windows, train_model, EpochRecord, Result, TrainConfig, TrainHistory, TrainError};
use crate::evalx::{compute_metrics, MetricSet};
use crate::ingest::{cv_folds, CvFold, PanelTable};
use crate::tensor::Scalar;
use crate::tft::TftConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    /// Leading share of the timeline that is never tested.
    pub burn_in_fraction: f64,
    /// Train folds concurrently on the rayon pool.
    pub parallel: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            burn_in_fraction: 0.6,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub index: usize,
    pub test_weeks: Range<u32>,
    pub n_train_windows: usize,
    pub n_test_windows: usize,
    pub metrics: MetricSet,
    pub history: TrainHistory,
}

/// Mean and sample standard deviation of one metric across folds.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub rmse: MetricSummary,
    pub mae: MetricSummary,
    pub r2: MetricSummary,
    pub smape: MetricSummary,
}

#[derive(Serialize)]
struct FoldJson {
    fold: usize,
    test_weeks: [u32; 2],
    n_train_windows: usize,
    n_test_windows: usize,
    rmse: f64,
    mae: f64,
    r2: f64,
    smape: f64,
    epochs: usize,
    best_epoch: usize,
}

#[derive(Serialize)]
struct AverageJson {
    rmse: MetricSummary,
    mae: MetricSummary,
    r2: MetricSummary,
    smape: MetricSummary,
}

#[derive(Serialize)]
struct ReportJson {
    folds: Vec<FoldJson>,
    average: AverageJson,
}

impl CvReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let col = |f: fn(&MetricSet) -> f64| folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>();
        Self {
            rmse: MetricSummary::of(&col(|m| m.rmse)),
            mae: MetricSummary::of(&col(|m| m.mae)),
            r2: MetricSummary::of(&col(|m| m.r2)),
            smape: MetricSummary::of(&col(|m| m.smape)),
            folds,
        }
    }

    /// One row per fold, then an `Ave` row of `mean ± sd` cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Fold,RMSE,MAE,R2,SMAPE\n");
        for f in &self.folds {
            let m = &f.metrics;
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.4},{:.2}%",
                f.index, m.rmse, m.mae, m.r2, m.smape
            );
        }
        let _ = writeln!(
            out,
            "Ave,{:.2} ± {:.2},{:.2} ± {:.2},{:.4} ± {:.4},{:.2}% ± {:.2}%",
            self.rmse.mean,
            self.rmse.sd,
            self.mae.mean,
            self.mae.sd,
            self.r2.mean,
            self.r2.sd,
            self.smape.mean,
            self.smape.sd
        );
        out
    }

    pub fn to_json(&self) -> String {
        let report = ReportJson {
            folds: self
                .folds
                .iter()
                .map(|f| FoldJson {
                    fold: f.index,
                    test_weeks: [f.test_weeks.start, f.test_weeks.end],
                    n_train_windows: f.n_train_windows,
                    n_test_windows: f.n_test_windows,
                    rmse: f.metrics.rmse,
                    mae: f.metrics.mae,
                    r2: f.metrics.r2,
                    smape: f.metrics.smape,
                    epochs: f.history.epochs(),
                    best_epoch: f.history.best_epoch + 1,
                })
                .collect(),
            average: AverageJson {
                rmse: self.rmse,
                mae: self.mae,
                r2: self.r2,
                smape: self.smape,
            },
        };
        serde_json::to_string_pretty(&report).expect("report serializes")
    }
}

fn run_fold<T: Scalar>(
    fold: &CvFold,
    tft: &TftConfig,
    train: &TrainConfig,
    observer: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<FoldResult> {
    let cfg = TrainConfig {
        seed: derive_seed(train.seed, fold.index as u64),
        ..train.clone()
    };
    let (model, history) = train_model::<T>(&fold.train, tft, &cfg, &mut |r| observer(fold.index, r))?;
    let (forecast, _) = forecast_windows(&model, &fold.test, &fold.scalers)?;
    let actual = forecast.actuals().ok_or(TrainError::NoWindows)?;
    let metrics = compute_metrics(&forecast.median(), &actual)?;
    Ok(FoldResult {
        index: fold.index,
        test_weeks: fold.test_weeks.clone(),
        n_train_windows: fold.train.len(),
        n_test_windows: fold.test.len(),
        metrics,
        history,
    })
}

/// Expanding-origin cross-validation: a fresh scaler set and model per fold,
/// scored on the fold's test windows in dollars.
pub fn run_cv<T: Scalar>(
    panel: &PanelTable,
    cv: &CvConfig,
    tft: &TftConfig,
    train: &TrainConfig,
    observer: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<CvReport> {
    if panel.stores().len() > tft.n_static_categories {
        return Err(TrainError::Config(format!(
            "{} stores exceed {} static categories",
            panel.stores().len(),
            tft.n_static_categories
        )));
    }
    let folds = cv_folds(panel, cv.folds, tft.encoder_len, tft.horizon, cv.burn_in_fraction)?;
    let results: Vec<Result<FoldResult>> = if cv.parallel {
        folds.par_iter().map(|f| run_fold::<T>(f, tft, train, observer)).collect()
    } else {
        folds.iter().map(|f| run_fold::<T>(f, tft, train, observer)).collect()
    };
    Ok(CvReport::from_folds(results.into_iter().collect::<Result<Vec<_>>>()?))
}

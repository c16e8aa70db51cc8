//! Dollar-space metrics, interval calibration, residual diagnostics, and
//! interpretability summaries.
//!
//! Every model is scored through [`compute_metrics`]; there is no other
//! metric path.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{DECODER_FEATURES, ENCODER_FEATURES};
use crate::tft::{ModelOutput, QuantileForecast};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{pred} predictions for {actual} actuals")]
    LengthMismatch { pred: usize, actual: usize },
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all actual values are equal; R² is undefined")]
    ConstantActuals,
    #[error("no forecast/actual pairs")]
    NoPairs,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Point-forecast accuracy. `smape` is in percent.
#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct MetricSet {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub smape: f64,
    pub n: usize,
}

impl MetricSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric set serializes")
    }
}

/// RMSE, MAE, R² against the mean of `actual`, and SMAPE with the halved
/// denominator `(|y| + |ŷ|) / 2`. A point where both are zero contributes 0.
pub fn compute_metrics(pred: &[f64], actual: &[f64]) -> Result<MetricSet> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            actual: actual.len(),
        });
    }
    let n = actual.len();
    if n < 2 {
        return Err(EvalError::TooFewPoints(n));
    }
    if actual.iter().all(|&a| a == actual[0]) {
        return Err(EvalError::ConstantActuals);
    }
    let nf = n as f64;
    let mean = actual.iter().sum::<f64>() / nf;
    let mut sse = 0.0;
    let mut sae = 0.0;
    let mut sst = 0.0;
    let mut sape = 0.0;
    for (&p, &a) in pred.iter().zip(actual) {
        let e = p - a;
        sse += e * e;
        sae += e.abs();
        sst += (a - mean) * (a - mean);
        let denom = (a.abs() + p.abs()) / 2.0;
        if denom > 0.0 {
            sape += e.abs() / denom;
        }
    }
    Ok(MetricSet {
        rmse: (sse / nf).sqrt(),
        mae: sae / nf,
        r2: 1.0 - sse / sst,
        smape: 100.0 * sape / nf,
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub nominal: f64,
    pub coverage: f64,
    pub per_horizon: Vec<f64>,
    pub mean_width: f64,
    pub per_horizon_width: Vec<f64>,
    pub n: usize,
}

impl CalibrationReport {
    /// `horizon,coverage,mean_width`, one row per step then an `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,coverage,mean_width\n");
        for (h, (c, w)) in self.per_horizon.iter().zip(&self.per_horizon_width).enumerate() {
            let _ = writeln!(out, "{},{c:?},{w:?}", h + 1);
        }
        let _ = writeln!(out, "all,{:?},{:?}", self.coverage, self.mean_width);
        out
    }
}

/// Coverage of `[lower, upper]` (inclusive) over the actuals, with a
/// breakdown by 1-based horizon step.
pub fn coverage_from_bounds(
    lower: &[f64],
    upper: &[f64],
    actual: &[f64],
    horizon: &[usize],
    nominal: f64,
) -> Result<CalibrationReport> {
    let n = actual.len();
    if lower.len() != n || upper.len() != n || horizon.len() != n {
        return Err(EvalError::LengthMismatch {
            pred: lower.len().min(upper.len()).min(horizon.len()),
            actual: n,
        });
    }
    if n == 0 {
        return Err(EvalError::NoPairs);
    }
    let steps = horizon.iter().copied().max().unwrap_or(1);
    let mut hits = vec![0usize; steps];
    let mut counts = vec![0usize; steps];
    let mut widths = vec![0.0; steps];
    for i in 0..n {
        let h = horizon[i].max(1) - 1;
        counts[h] += 1;
        widths[h] += upper[i] - lower[i];
        if lower[i] <= actual[i] && actual[i] <= upper[i] {
            hits[h] += 1;
        }
    }
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    Ok(CalibrationReport {
        nominal,
        coverage: hits.iter().sum::<usize>() as f64 / n as f64,
        per_horizon: hits.iter().zip(&counts).map(|(&h, &c)| ratio(h as f64, c)).collect(),
        mean_width: widths.iter().sum::<f64>() / n as f64,
        per_horizon_width: widths.iter().zip(&counts).map(|(&w, &c)| ratio(w, c)).collect(),
        n,
    })
}

/// Coverage of the outermost predicted quantiles of `forecast`.
pub fn interval_coverage(forecast: &QuantileForecast, nominal: f64) -> Result<CalibrationReport> {
    let actual = forecast.actuals().ok_or(EvalError::NoPairs)?;
    let horizon: Vec<usize> = forecast.rows.iter().map(|r| r.horizon).collect();
    coverage_from_bounds(&forecast.lower(), &forecast.upper(), &actual, &horizon, nominal)
}

/// Mean attention weight per lag `query position − key position`.
///
/// Every decoder row of every output contributes equally, so the series sums
/// to 1 when all rows are normalized. Returned in lag order `0..=encoder_len + horizon − 1`.
pub fn attention_by_lag(outputs: &[ModelOutput]) -> Vec<(usize, f64)> {
    let Some(first) = outputs.first() else {
        return Vec::new();
    };
    let keys = first.encoder_len + first.horizon;
    let mut sums = vec![0.0; keys];
    let mut rows = 0usize;
    for out in outputs {
        let k = out.encoder_len + out.horizon;
        for b in 0..out.batch {
            for t in 0..out.horizon {
                let query = out.encoder_len + t;
                let row = out.attention_row(b, t);
                for (j, &w) in row.iter().enumerate().take(query + 1) {
                    let lag = query - j;
                    if lag < sums.len() {
                        sums[lag] += w;
                    }
                }
                rows += 1;
                debug_assert_eq!(row.len(), k);
            }
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(lag, s)| (lag, if rows == 0 { 0.0 } else { s / rows as f64 }))
        .collect()
}

pub fn attention_csv(series: &[(usize, f64)]) -> String {
    let mut out = String::from("lag,mean_weight\n");
    for (lag, w) in series {
        let _ = writeln!(out, "{lag},{w:?}");
    }
    out
}

/// Mean variable-selection weight per variable.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariableImportance {
    pub encoder: Vec<(String, f64)>,
    pub decoder: Vec<(String, f64)>,
}

impl VariableImportance {
    /// `side,variable,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,variable,weight\n");
        for (side, list) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (name, w) in list {
                let _ = writeln!(out, "{side},{name},{w:?}");
            }
        }
        out
    }

    /// Encoder variables, most important first.
    pub fn encoder_ranking(&self) -> Vec<(String, f64)> {
        let mut r = self.encoder.clone();
        r.sort_by(|a, b| b.1.total_cmp(&a.1));
        r
    }
}

fn mean_rows(rows: impl Iterator<Item = f64>, width: usize, data_len: usize) -> Vec<f64> {
    let mut sums = vec![0.0; width];
    let mut i = 0;
    for v in rows {
        sums[i % width] += v;
        i += 1;
    }
    let count = (data_len / width.max(1)).max(1) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

fn names(list: &[&str], n: usize) -> Vec<String> {
    (0..n)
        .map(|i| list.get(i).map_or_else(|| format!("var{i}"), |s| s.to_string()))
        .collect()
}

/// Averages selection weights over samples and time steps, per side.
pub fn variable_importance(outputs: &[ModelOutput]) -> VariableImportance {
    let Some(first) = outputs.first() else {
        return VariableImportance {
            encoder: Vec::new(),
            decoder: Vec::new(),
        };
    };
    let (ve, vd) = (first.n_encoder_vars, first.n_decoder_vars);
    let enc_len: usize = outputs.iter().map(|o| o.encoder_weights.len()).sum();
    let dec_len: usize = outputs.iter().map(|o| o.decoder_weights.len()).sum();
    let enc = mean_rows(
        outputs.iter().flat_map(|o| o.encoder_weights.iter().copied()),
        ve,
        enc_len,
    );
    let dec = mean_rows(
        outputs.iter().flat_map(|o| o.decoder_weights.iter().copied()),
        vd,
        dec_len,
    );
    VariableImportance {
        encoder: names(&ENCODER_FEATURES, ve).into_iter().zip(enc).collect(),
        decoder: names(&DECODER_FEATURES, vd).into_iter().zip(dec).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    /// `actual − pred`, in input order.
    pub residuals: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub sd: f64,
    /// Lag-1 autocorrelation; 0 when the residuals have no variance.
    pub lag1_autocorr: f64,
}

/// Residual summary; inputs should be ordered by time.
pub fn residual_diagnostics(pred: &[f64], actual: &[f64]) -> Result<ResidualReport> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            actual: actual.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let residuals: Vec<f64> = actual.iter().zip(pred).map(|(a, p)| a - p).collect();
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let ss: f64 = residuals.iter().map(|e| (e - mean).powi(2)).sum();
    let sd = if residuals.len() > 1 {
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let cross: f64 = residuals
        .windows(2)
        .map(|w| (w[0] - mean) * (w[1] - mean))
        .sum();
    let lag1_autocorr = if ss > 0.0 { cross / ss } else { 0.0 };
    Ok(ResidualReport {
        residuals,
        mean,
        sd,
        lag1_autocorr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let a = [1.0, 2.0, 5.0];
        let m = compute_metrics(&a, &a).unwrap();
        assert_eq!((m.rmse, m.mae, m.r2, m.smape, m.n), (0.0, 0.0, 1.0, 0.0, 3));
    }

    #[test]
    fn mean_prediction_has_zero_r2() {
        let a = [1.0, 2.0, 6.0];
        let m = compute_metrics(&[3.0; 3], &a).unwrap();
        assert!(m.r2.abs() < 1e-15);
    }

    #[test]
    fn two_point_example() {
        let m = compute_metrics(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(m.rmse, 1.0);
        assert_eq!(m.mae, 1.0);
        let smape = 50.0 * (1.0 / 1.5 + 1.0 / 3.5);
        assert!((m.smape - smape).abs() < 1e-12);
        assert!((m.smape - 47.62).abs() < 0.005);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(
            compute_metrics(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { pred: 1, actual: 2 })
        );
        assert_eq!(compute_metrics(&[1.0], &[1.0]), Err(EvalError::TooFewPoints(1)));
        assert_eq!(
            compute_metrics(&[1.0, 2.0], &[3.0, 3.0]),
            Err(EvalError::ConstantActuals)
        );
    }

    #[test]
    fn coverage_edges() {
        let a = [1.0, 2.0, 3.0];
        let h = [1, 2, 1];
        let r = coverage_from_bounds(&a, &a, &a, &h, 0.9).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.per_horizon, vec![1.0, 1.0]);
        assert_eq!(r.mean_width, 0.0);
        let r = coverage_from_bounds(&[0.0; 3], &[0.5; 3], &a, &h, 0.9).unwrap();
        assert_eq!(r.coverage, 0.0);
        assert!(r.to_csv().starts_with("horizon,coverage,mean_width\n1,"));
        assert_eq!(
            coverage_from_bounds(&[], &[], &[], &[], 0.9),
            Err(EvalError::NoPairs)
        );
    }

    #[test]
    fn residual_conventions() {
        let a = [3.0, 4.0, 5.0];
        let r = residual_diagnostics(&a, &a).unwrap();
        assert_eq!(r.lag1_autocorr, 0.0);
        assert_eq!(r.mean, 0.0);
        let p: Vec<f64> = a.iter().map(|x| x - 2.5).collect();
        assert_eq!(residual_diagnostics(&p, &a).unwrap().mean, 2.5);
        let alt: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = residual_diagnostics(&vec![0.0; 1000], &alt).unwrap();
        assert!((r.lag1_autocorr + 1.0).abs() < 1e-2);
    }

    fn uniform_output(horizon: usize, enc: usize) -> ModelOutput {
        let k = enc + horizon;
        let mut attention = Vec::new();
        for t in 0..horizon {
            let visible = enc + t + 1;
            attention.extend((0..k).map(|j| if j < visible { 1.0 / visible as f64 } else { 0.0 }));
        }
        ModelOutput {
            batch: 1,
            horizon,
            encoder_len: enc,
            n_quantiles: 1,
            n_encoder_vars: 1,
            n_decoder_vars: 1,
            quantiles: vec![0.0; horizon],
            attention,
            encoder_weights: vec![1.0; enc],
            decoder_weights: vec![1.0; horizon],
        }
    }

    #[test]
    fn uniform_attention_single_position() {
        let series = attention_by_lag(&[uniform_output(1, 52)]);
        assert_eq!(series.len(), 53);
        for &(_, w) in &series {
            assert!((w - 1.0 / 53.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_series_sums_to_one() {
        let series = attention_by_lag(&[uniform_output(5, 52), uniform_output(5, 52)]);
        assert_eq!(series.len(), 57);
        assert_eq!(series.last().unwrap().0, 56);
        let total: f64 = series.iter().map(|p| p.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(attention_csv(&series).starts_with("lag,mean_weight\n0,"));
    }

    #[test]
    fn singleton_importance() {
        let imp = variable_importance(&[uniform_output(5, 52)]);
        assert_eq!(imp.decoder, vec![("holiday_flag".to_string(), 1.0)]);
        assert_eq!(imp.encoder[0].1, 1.0);
        assert!(imp.to_csv().contains("decoder,holiday_flag,1.0"));
    }
}

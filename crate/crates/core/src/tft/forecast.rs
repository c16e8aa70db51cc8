use std::fmt::Write as _;

use super::{ModelOutput, Result, TftError};
use crate::ingest::{ScalerSet, WindowSample};

/// One dollar-space quantile forecast for a (store, origin, horizon step).
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRow {
    pub store: u32,
    pub origin_t: u32,
    /// 1-based horizon step.
    pub horizon: usize,
    /// Ascending quantile values in dollars.
    pub values: Vec<f64>,
    /// Observed dollars when the forecast week is inside the data.
    pub actual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    pub rows: Vec<ForecastRow>,
}

impl QuantileForecast {
    fn level_index(&self, level: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - level).abs() < 1e-12)
    }

    /// Values at quantile `level` for every row, or `None` if not predicted.
    pub fn column(&self, level: f64) -> Option<Vec<f64>> {
        let i = self.level_index(level)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    /// Lowest, middle, and highest predicted quantile of every row.
    pub fn lower(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.values[0]).collect()
    }

    pub fn median(&self) -> Vec<f64> {
        let mid = self.levels.len() / 2;
        self.rows.iter().map(|r| r.values[mid]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.values[r.values.len() - 1]).collect()
    }

    pub fn actuals(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.actual).collect()
    }

    /// `store,origin_t,horizon,q10,q50,q90`.
    pub fn to_csv(&self) -> String {
        self.write_csv(false)
    }

    /// As [`to_csv`](Self::to_csv) with a trailing `actual` column, empty
    /// where the week is not observed.
    pub fn to_csv_with_actual(&self) -> String {
        self.write_csv(true)
    }

    fn write_csv(&self, with_actual: bool) -> String {
        let mut out = String::from("store,origin_t,horizon");
        for l in &self.levels {
            let _ = write!(out, ",q{}", (l * 100.0).round() as i64);
        }
        if with_actual {
            out.push_str(",actual");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.store, r.origin_t, r.horizon);
            for v in &r.values {
                let _ = write!(out, ",{v:?}");
            }
            if with_actual {
                out.push(',');
                if let Some(a) = r.actual {
                    let _ = write!(out, "{a:?}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Sorts scaled quantiles ascending, then maps them back to dollars.
pub fn repair_and_unscale(scaled: &[f64], scalers: &ScalerSet) -> Vec<f64> {
    let mut sorted = scaled.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.into_iter().map(|s| scalers.unscale_target(s)).collect()
}

/// Dollar-space intervals for the windows that produced `output`, in the
/// same order. Actuals are attached from each window.
pub fn predict_intervals(
    output: &ModelOutput,
    samples: &[WindowSample],
    levels: &[f64],
    scalers: &ScalerSet,
) -> Result<QuantileForecast> {
    if samples.len() != output.batch || levels.len() != output.n_quantiles {
        return Err(TftError::ShapeMismatch(format!(
            "{} windows and {} levels for an output of {} samples with {} quantiles",
            samples.len(),
            levels.len(),
            output.batch,
            output.n_quantiles
        )));
    }
    let q = output.n_quantiles;
    let mut rows = Vec::with_capacity(output.batch * output.horizon);
    for (b, s) in samples.iter().enumerate() {
        for h in 0..output.horizon {
            let start = (b * output.horizon + h) * q;
            rows.push(ForecastRow {
                store: s.store,
                origin_t: s.origin_t,
                horizon: h + 1,
                values: repair_and_unscale(&output.quantiles[start..start + q], scalers),
                actual: s.actual.get(h).copied(),
            });
        }
    }
    Ok(QuantileForecast {
        levels: levels.to_vec(),
        rows,
    })
}

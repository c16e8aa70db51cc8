use serde::Serialize;

use super::{IngestError, PanelTable, Result};

/// Column labels of the descriptive statistics table, in output order.
pub const STAT_COLUMNS: [&str; 7] = [
    "Store",
    "Weekly_Sales",
    "Holiday_Flag",
    "Temperature",
    "Fuel_Price",
    "CPI",
    "Unemployment",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColumnStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub sd: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsTable {
    pub columns: Vec<(String, ColumnStats)>,
}

impl StatsTable {
    pub fn column(&self, name: &str) -> Option<&ColumnStats> {
        self.columns
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, s)| s)
    }

    /// CSV with one row per statistic and one column per variable.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stat");
        for (name, _) in &self.columns {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let rows: [(&str, fn(&ColumnStats) -> f64); 8] = [
            ("count", |s| s.count as f64),
            ("mean", |s| s.mean),
            ("sd", |s| s.sd),
            ("min", |s| s.min),
            ("25%", |s| s.q25),
            ("50%", |s| s.q50),
            ("75%", |s| s.q75),
            ("max", |s| s.max),
        ];
        for (label, get) in rows {
            out.push_str(label);
            for (_, s) in &self.columns {
                out.push(',');
                out.push_str(&format!("{}", get(s)));
            }
            out.push('\n');
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data (position `p·(n−1)`).
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub(crate) fn column_stats(values: &[f64]) -> ColumnStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    ColumnStats {
        count: n,
        mean,
        sd,
        min: sorted[0],
        q25: quantile_sorted(&sorted, 0.25),
        q50: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        max: sorted[n - 1],
    }
}

/// count/mean/SD/quartiles/extremes of every raw numeric column.
pub fn descriptive_stats(panel: &PanelTable) -> Result<StatsTable> {
    if panel.is_empty() {
        return Err(IngestError::EmptyPanel);
    }
    let columns = STAT_COLUMNS
        .iter()
        .zip(raw_columns(panel))
        .map(|(name, values)| (name.to_string(), column_stats(&values)))
        .collect();
    Ok(StatsTable { columns })
}

/// Raw numeric columns in [`STAT_COLUMNS`] order.
fn raw_columns(panel: &PanelTable) -> Vec<Vec<f64>> {
    let extract: [fn(&super::SalesRecord) -> f64; 7] = [
        |r| r.store as f64,
        |r| r.weekly_sales,
        |r| r.holiday_flag as f64,
        |r| r.temperature,
        |r| r.fuel_price,
        |r| r.cpi,
        |r| r.unemployment,
    ];
    extract
        .iter()
        .map(|f| panel.rows().iter().map(|r| f(&r.record)).collect())
        .collect()
}

/// Pearson correlations between the raw columns other than `Store`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// Row-major `names.len()²`; NaN where a column has no variance.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.names.len() + j]
    }

    /// Long format `row,column,correlation`, ready for a heatmap.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,column,correlation\n");
        for (i, a) in self.names.iter().enumerate() {
            for (j, b) in self.names.iter().enumerate() {
                out.push_str(&format!("{a},{b},{:?}\n", self.get(i, j)));
            }
        }
        out
    }
}

pub fn correlation_matrix(panel: &PanelTable) -> Result<CorrelationMatrix> {
    if panel.is_empty() {
        return Err(IngestError::EmptyPanel);
    }
    let cols: Vec<Vec<f64>> = raw_columns(panel).into_iter().skip(1).collect();
    let centred: Vec<(Vec<f64>, f64)> = cols
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let d: Vec<f64> = c.iter().map(|v| v - mean).collect();
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d, norm)
        })
        .collect();
    let k = centred.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (a, na) = &centred[i];
            let (b, nb) = &centred[j];
            values[i * k + j] = if *na == 0.0 || *nb == 0.0 {
                f64::NAN
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            };
        }
    }
    Ok(CorrelationMatrix {
        names: STAT_COLUMNS[1..].iter().map(|s| s.to_string()).collect(),
        values,
    })
}

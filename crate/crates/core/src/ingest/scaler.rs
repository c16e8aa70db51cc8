use serde::{Deserialize, Serialize};

use super::{IngestError, PanelRow, PanelTable, Result};

/// Covariates that are z-scored, in feature order.
pub const SCALED_COVARIATES: [&str; 5] = ["temperature", "fuel_price", "cpi", "unemployment", "t_idx"];

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: f64,
    pub sd: f64,
}

impl ZScore {
    fn fit(name: &'static str, values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(IngestError::ConstantColumn(name));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        if !(sd > 0.0) {
            return Err(IngestError::ConstantColumn(name));
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn fit(name: &'static str, values: &[f64]) -> Result<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(IngestError::ConstantColumn(name));
        }
        Ok(Self { min, max })
    }

    /// No clipping: values outside the fitted range map outside `[0, 1]`.
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, s: f64) -> f64 {
        self.min + s * (self.max - self.min)
    }
}

/// Scaling fitted on training rows only.
///
/// The target is transformed as `minmax(ln(weekly_sales))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerSet {
    pub temperature: ZScore,
    pub fuel_price: ZScore,
    pub cpi: ZScore,
    pub unemployment: ZScore,
    pub t_idx: ZScore,
    pub log_sales: MinMax,
}

impl ScalerSet {
    pub fn fit(train: &PanelTable) -> Result<Self> {
        let rows = train.rows();
        if rows.is_empty() {
            return Err(IngestError::EmptyPanel);
        }
        let col = |f: fn(&PanelRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            temperature: ZScore::fit("temperature", &col(|r| r.record.temperature))?,
            fuel_price: ZScore::fit("fuel_price", &col(|r| r.record.fuel_price))?,
            cpi: ZScore::fit("cpi", &col(|r| r.record.cpi))?,
            unemployment: ZScore::fit("unemployment", &col(|r| r.record.unemployment))?,
            t_idx: ZScore::fit("t_idx", &col(|r| r.t_idx as f64))?,
            log_sales: MinMax::fit("log_sales", &col(|r| r.log_sales))?,
        })
    }

    pub fn scale_target(&self, dollars: f64) -> f64 {
        self.log_sales.apply(dollars.ln())
    }

    pub fn unscale_target(&self, scaled: f64) -> f64 {
        self.log_sales.inverse(scaled).exp()
    }

    /// Known covariates of one row in decoder feature order:
    /// holiday flag, then the z-scored [`SCALED_COVARIATES`].
    pub fn known_features(&self, row: &PanelRow) -> [f64; 6] {
        [
            row.record.holiday_flag as f64,
            self.temperature.apply(row.record.temperature),
            self.fuel_price.apply(row.record.fuel_price),
            self.cpi.apply(row.record.cpi),
            self.unemployment.apply(row.record.unemployment),
            self.t_idx.apply(row.t_idx as f64),
        ]
    }

    /// Flat `name=value` pairs for manifests; floats use round-trip formatting.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let z = [
            ("temperature", self.temperature),
            ("fuel_price", self.fuel_price),
            ("cpi", self.cpi),
            ("unemployment", self.unemployment),
            ("t_idx", self.t_idx),
        ];
        let mut out = Vec::new();
        for (name, s) in z {
            out.push((format!("scaler.{name}.mean"), format!("{:?}", s.mean)));
            out.push((format!("scaler.{name}.sd"), format!("{:?}", s.sd)));
        }
        out.push(("scaler.log_sales.min".into(), format!("{:?}", self.log_sales.min)));
        out.push(("scaler.log_sales.max".into(), format!("{:?}", self.log_sales.max)));
        out
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<f64>) -> Option<Self> {
        let z = |name: &str| {
            Some(ZScore {
                mean: get(&format!("scaler.{name}.mean"))?,
                sd: get(&format!("scaler.{name}.sd"))?,
            })
        };
        Some(Self {
            temperature: z("temperature")?,
            fuel_price: z("fuel_price")?,
            cpi: z("cpi")?,
            unemployment: z("unemployment")?,
            t_idx: z("t_idx")?,
            log_sales: MinMax {
                min: get("scaler.log_sales.min")?,
                max: get("scaler.log_sales.max")?,
            },
        })
    }
}

//! Deterministic synthetic panel shaped like the 45-store weekly sales data.
//!
//! Used as a stand-in when the real file is not available: same column set,
//! 143 weekly rows per store from 2010-02-05, the same ten holiday weeks,
//! store levels spread across roughly 0.2M–3.5M USD, an annual profile with a
//! Thanksgiving/December peak and a January trough, and slowly drifting
//! macro covariates.

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ingest::{PanelTable, Result, SalesRecord};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub stores: u32,
    pub weeks: usize,
    pub seed: u64,
    /// Standard deviation of the multiplicative weekly noise (log scale).
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            stores: 45,
            weeks: 143,
            seed: 2010,
            noise: 0.04,
        }
    }
}

pub fn first_week() -> NaiveDate {
    NaiveDate::from_ymd_opt(2010, 2, 5).unwrap()
}

/// Holiday weeks flagged in the reference data (Super Bowl, Labor Day,
/// Thanksgiving, Christmas), identified by the Friday ending the week.
pub fn is_holiday_week(date: NaiveDate) -> bool {
    const HOLIDAYS: [(i32, u32, u32); 10] = [
        (2010, 2, 12),
        (2011, 2, 11),
        (2012, 2, 10),
        (2010, 9, 10),
        (2011, 9, 9),
        (2012, 9, 7),
        (2010, 11, 26),
        (2011, 11, 25),
        (2010, 12, 31),
        (2011, 12, 30),
    ];
    HOLIDAYS
        .iter()
        .any(|&(y, m, d)| NaiveDate::from_ymd_opt(y, m, d) == Some(date))
}

/// Multiplicative annual profile keyed on the week's end date.
fn seasonal_profile(date: NaiveDate) -> f64 {
    let (m, d) = (date.month(), date.day());
    let doy = date.ordinal() as f64;
    let smooth = 1.0 + 0.03 * (2.0 * std::f64::consts::PI * (doy - 200.0) / 365.25).cos();
    let spike = match (m, d) {
        (11, 22..=28) => 1.38,
        (12, 1..=7) => 1.08,
        (12, 8..=14) => 1.16,
        (12, 15..=21) => 1.32,
        (12, 22..=28) => 1.62,
        (12, 29..=31) | (1, 1..=3) => 0.92,
        (1, _) => 0.88,
        _ => 1.0,
    };
    smooth * spike
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn generate_records(cfg: &SynthConfig) -> Vec<SalesRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let start = first_week();

    // national fuel path shared by all stores
    let mut fuel = Vec::with_capacity(cfg.weeks);
    let mut level: f64 = 2.62;
    for w in 0..cfg.weeks {
        let years = w as f64 / 52.0;
        let drift = if years < 1.25 { 0.010 } else if years < 1.6 { -0.004 } else { 0.001 };
        level = (level + drift + 0.025 * std_normal.sample(&mut rng)).clamp(2.47, 4.47);
        fuel.push(level);
    }

    let mut records = Vec::with_capacity(cfg.stores as usize * cfg.weeks);
    for store in 1..=cfg.stores {
        let u: f64 = rng.random();
        let base = (12.55 + 2.0 * (u - 0.5) + 0.25 * std_normal.sample(&mut rng)).exp();
        let growth = 0.05 * std_normal.sample(&mut rng);
        let season_strength = 0.6 + 0.8 * rng.random::<f64>();
        let temp_mean = 45.0 + 30.0 * rng.random::<f64>();
        let temp_amp = 10.0 + 15.0 * rng.random::<f64>();
        let fuel_offset = 0.2 * (rng.random::<f64>() - 0.5);
        let low_cpi = rng.random::<f64>() < 0.35;
        let cpi0 = if low_cpi {
            126.1 + 6.0 * rng.random::<f64>()
        } else {
            190.0 + 25.0 * rng.random::<f64>()
        };
        let unemp0 = 5.0 + 7.0 * rng.random::<f64>();
        let mut ar = 0.0;

        for w in 0..cfg.weeks {
            let date = start + Duration::weeks(w as i64);
            let years = w as f64 / 52.0;
            let doy = date.ordinal() as f64;
            let temperature = temp_mean
                + temp_amp * (2.0 * std::f64::consts::PI * (doy - 196.0) / 365.25).cos()
                + 5.0 * std_normal.sample(&mut rng);
            let holiday = is_holiday_week(date);
            let season = 1.0 + season_strength * (seasonal_profile(date) - 1.0);
            let holiday_lift = if holiday && date.month() == 2 { 1.03 } else { 1.0 };
            ar = 0.5 * ar + cfg.noise * std_normal.sample(&mut rng);
            let sales = base * (growth * years).exp() * season * holiday_lift * ar.exp()
                * (1.0 - 0.002 * (temperature - 60.0).abs() / 10.0);
            let cpi = cpi0 * (1.0 + if low_cpi { 0.035 } else { 0.022 } * years)
                + 0.15 * std_normal.sample(&mut rng);
            let unemployment = (unemp0 - 0.45 * years + 0.12 * std_normal.sample(&mut rng))
                .clamp(3.88, 14.31);
            records.push(SalesRecord {
                store,
                date,
                weekly_sales: round2(sales.max(1.0)),
                holiday_flag: u8::from(holiday),
                temperature: round2(temperature),
                fuel_price: (((fuel[w] + fuel_offset).clamp(2.47, 4.47)) * 1000.0).round() / 1000.0,
                cpi: (cpi * 1e4).round() / 1e4,
                unemployment: (unemployment * 1000.0).round() / 1000.0,
            });
        }
    }
    records
}

pub fn generate_panel(cfg: &SynthConfig) -> Result<PanelTable> {
    PanelTable::from_records(generate_records(cfg))
}

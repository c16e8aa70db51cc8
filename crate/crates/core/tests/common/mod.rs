//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tft_retail::ingest::{holdout_protocol, HoldoutSplit, PanelTable, SalesRecord};
use tft_retail::synth::{first_week, generate_panel, SynthConfig};
use tft_retail::tft::TftConfig;

pub fn synth_panel(stores: u32, weeks: usize) -> PanelTable {
    generate_panel(&SynthConfig {
        stores,
        weeks,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// 80:20 hold-out split of a synthetic panel with the 52/5 window layout.
pub fn synth_split(stores: u32, weeks: usize) -> HoldoutSplit {
    holdout_protocol(&synth_panel(stores, weeks), 0.8, 52, 5).unwrap()
}

pub fn small_config(stores: usize) -> TftConfig {
    TftConfig {
        hidden_size: 8,
        attention_heads: 2,
        n_static_categories: stores,
        ..TftConfig::default()
    }
}

/// Panel whose sales depend on exactly one covariate.
///
/// Every covariate is independent noise. Log sales of week `t` are a linear
/// function of the temperature six weeks earlier plus a little noise, so the
/// five forecast weeks are explained by encoder-side temperature only. Every
/// store shares one level, so neither the sales history nor the store id
/// carries signal.
pub fn one_covariate_records(stores: u32, weeks: usize, seed: u64) -> Vec<SalesRecord> {
    const LAG: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for store in 1..=stores {
        let temps: Vec<f64> = (0..weeks + LAG)
            .map(|_| 60.0 + 15.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for w in 0..weeks {
            let driver = (temps[w] - 60.0) / 15.0;
            let noise: f64 = rng.sample(StandardNormal);
            let log_sales = 12.0 + 0.5 * driver + 0.02 * noise;
            out.push(SalesRecord {
                store,
                date: first_week() + Duration::weeks(w as i64),
                weekly_sales: log_sales.exp(),
                holiday_flag: u8::from(rng.random::<f64>() < 0.07),
                temperature: temps[w + LAG],
                fuel_price: 3.0 + 0.3 * rng.sample::<f64, _>(StandardNormal),
                cpi: 180.0 + 20.0 * rng.sample::<f64, _>(StandardNormal),
                unemployment: 8.0 + rng.sample::<f64, _>(StandardNormal),
            });
        }
    }
    out
}

//! Flat `key = value` run configuration.
//!
//! Recognised keys (all optional; command-line flags win over file values):
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | RNG seed for initialisation, shuffling, dropout |
//! | `threads` | worker threads; 1 forces fully deterministic mode |
//! | `hidden_size`, `attention_heads`, `dropout` | TFT width, heads, dropout rate |
//! | `encoder_len`, `horizon` | history and forecast lengths in weeks |
//! | `quantiles` | comma-separated quantile levels |
//! | `batch_size`, `learning_rate`, `max_epochs` | optimisation budget |
//! | `early_stop_patience`, `plateau_patience`, `plateau_factor` | schedules |
//! | `grad_clip_norm`, `validation_fraction` | clipping, inner validation share |
//! | `train_fraction` | hold-out split point per store |
//! | `folds`, `burn_in_fraction` | cross-validation layout |
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use tft_retail::tft::TftConfig;
use tft_retail::train::{CvConfig, TrainConfig};

pub const KEYS: [&str; 19] = [
    "seed",
    "threads",
    "hidden_size",
    "attention_heads",
    "dropout",
    "encoder_len",
    "horizon",
    "quantiles",
    "batch_size",
    "learning_rate",
    "max_epochs",
    "early_stop_patience",
    "plateau_patience",
    "plateau_factor",
    "grad_clip_norm",
    "validation_fraction",
    "train_fraction",
    "folds",
    "burn_in_fraction",
];

#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub threads: usize,
    pub tft: TftConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub cv: CvConfig,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: train.seed,
            threads: 1,
            tft: TftConfig::default(),
            train,
            train_fraction: 0.8,
            cv: CvConfig::default(),
        }
    }
}

pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", path.display(), n + 1);
        };
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            bail!("{}:{}: unknown key {key:?}", path.display(), n + 1);
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("config value {value:?} for {key} does not parse"))
}

impl Settings {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut s = Settings::default();
        for (k, v) in map {
            match k.as_str() {
                "seed" => s.seed = parse(k, v)?,
                "threads" => s.threads = parse(k, v)?,
                "hidden_size" => s.tft.hidden_size = parse(k, v)?,
                "attention_heads" => s.tft.attention_heads = parse(k, v)?,
                "dropout" => s.tft.dropout = parse(k, v)?,
                "encoder_len" => s.tft.encoder_len = parse(k, v)?,
                "horizon" => s.tft.horizon = parse(k, v)?,
                "quantiles" => {
                    s.tft.quantiles = v
                        .split(',')
                        .map(|q| parse(k, q.trim()))
                        .collect::<Result<Vec<f64>>>()?
                }
                "batch_size" => s.train.batch_size = parse(k, v)?,
                "learning_rate" => s.train.learning_rate = parse(k, v)?,
                "max_epochs" => s.train.max_epochs = parse(k, v)?,
                "early_stop_patience" => s.train.early_stop_patience = parse(k, v)?,
                "plateau_patience" => s.train.plateau_patience = parse(k, v)?,
                "plateau_factor" => s.train.plateau_factor = parse(k, v)?,
                "grad_clip_norm" => s.train.grad_clip_norm = parse(k, v)?,
                "validation_fraction" => s.train.validation_fraction = parse(k, v)?,
                "train_fraction" => s.train_fraction = parse(k, v)?,
                "folds" => s.cv.folds = parse(k, v)?,
                "burn_in_fraction" => s.cv.burn_in_fraction = parse(k, v)?,
                other => bail!("unknown config key {other:?}"),
            }
        }
        Ok(s)
    }

    /// Pushes shared values into the nested configs and validates them.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.cv.parallel = self.threads > 1;
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        if self.cv.folds < 2 {
            bail!("folds must be at least 2, got {}", self.cv.folds);
        }
        self.tft.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> Value {
        let t = &self.tft;
        let r = &self.train;
        json!({
            "seed": self.seed,
            "threads": self.threads,
            "tft": {
                "hidden_size": t.hidden_size,
                "attention_heads": t.attention_heads,
                "dropout": t.dropout,
                "encoder_len": t.encoder_len,
                "horizon": t.horizon,
                "quantiles": t.quantiles,
                "n_static_categories": t.n_static_categories,
                "n_encoder_vars": t.n_encoder_vars,
                "n_decoder_vars": t.n_decoder_vars,
                "lstm_layers": t.lstm_layers,
            },
            "train": {
                "batch_size": r.batch_size,
                "learning_rate": r.learning_rate,
                "max_epochs": r.max_epochs,
                "early_stop_patience": r.early_stop_patience,
                "plateau_factor": r.plateau_factor,
                "plateau_patience": r.plateau_patience,
                "grad_clip_norm": r.grad_clip_norm,
                "validation_fraction": r.validation_fraction,
                "seed": r.seed,
            },
            "train_fraction": self.train_fraction,
            "cv": {
                "folds": self.cv.folds,
                "burn_in_fraction": self.cv.burn_in_fraction,
                "parallel": self.cv.parallel,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nhidden_size = 16\nquantiles = 0.05, 0.5, 0.95\nfolds=3\n").unwrap();
        let s = Settings::from_map(&parse_file(&path).unwrap()).unwrap().finish().unwrap();
        assert_eq!(s.tft.hidden_size, 16);
        assert_eq!(s.tft.quantiles, vec![0.05, 0.5, 0.95]);
        assert_eq!(s.cv.folds, 3);
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "hiden_size = 16\n").unwrap();
        assert!(parse_file(&path).is_err());
    }
}

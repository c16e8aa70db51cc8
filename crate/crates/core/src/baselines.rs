//! CNN-1D, LSTM, and CNN-LSTM point forecasters, a seasonal-naive reference,
//! and the shared comparison harness.
//!
//! The neural baselines read the same scaled encoder features as the TFT,
//! regress the same scaled log-sales with MSE, and emit one value per horizon
//! step from a dense head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::evalx::{compute_metrics, EvalError, MetricSet};
use crate::ingest::{ScalerSet, WindowSample, WindowSet, ENCODER_FEATURES};
use crate::nn::{Linear, Lstm};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::tft::{Mode, QuantileForecast};
use crate::train::{fit, EpochRecord, TrainConfig, TrainError, TrainHistory, Trainable};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("unknown model kind {0:?} (expected cnn, lstm, cnn_lstm, or seasonal_naive)")]
    UnknownKind(String),
    #[error("invalid baseline configuration: {0}")]
    Config(String),
    #[error("forecasts cover different prediction points: {0}")]
    ProtocolMismatch(String),
    #[error("model name {0:?} appears more than once")]
    DuplicateModel(String),
    #[error("external forecast file: {0}")]
    External(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = BaselineError> = std::result::Result<T, E>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineKind {
    Cnn,
    Lstm,
    CnnLstm,
    SeasonalNaive,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Cnn,
        BaselineKind::Lstm,
        BaselineKind::CnnLstm,
        BaselineKind::SeasonalNaive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Cnn => "cnn",
            BaselineKind::Lstm => "lstm",
            BaselineKind::CnnLstm => "cnn_lstm",
            BaselineKind::SeasonalNaive => "seasonal_naive",
        }
    }

    /// Label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Cnn => "CNN",
            BaselineKind::Lstm => "LSTM",
            BaselineKind::CnnLstm => "CNN-LSTM",
            BaselineKind::SeasonalNaive => "Seasonal naive",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cnn" => Ok(BaselineKind::Cnn),
            "lstm" => Ok(BaselineKind::Lstm),
            "cnn_lstm" => Ok(BaselineKind::CnnLstm),
            "seasonal_naive" | "naive" => Ok(BaselineKind::SeasonalNaive),
            _ => Err(BaselineError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub cnn_filters: usize,
    pub cnn_kernel: usize,
    pub lstm_units: usize,
    pub encoder_len: usize,
    pub n_features: usize,
    pub horizon: usize,
    pub learning_rate: f64,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            cnn_filters: 32,
            cnn_kernel: 4,
            lstm_units: 50,
            encoder_len: 52,
            n_features: ENCODER_FEATURES.len(),
            horizon: 5,
            learning_rate: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_kernel == 0 || self.cnn_kernel > self.encoder_len {
            return Err(BaselineError::Config(format!(
                "kernel {} must lie in 1..={}",
                self.cnn_kernel, self.encoder_len
            )));
        }
        if self.cnn_filters == 0 || self.lstm_units == 0 || self.horizon == 0 || self.n_features == 0 {
            return Err(BaselineError::Config("layer widths must be at least 1".into()));
        }
        if self.kind == BaselineKind::SeasonalNaive && self.encoder_len < 52 {
            return Err(BaselineError::Config(
                "seasonal naive needs at least 52 encoder weeks".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let conv = Linear::num_params(self.cnn_kernel * self.n_features, self.cnn_filters, true);
        let lstm_in = |f| Lstm::num_params(f, self.lstm_units);
        let head = |i| Linear::num_params(i, self.horizon, true);
        match self.kind {
            BaselineKind::Cnn => conv + head(self.encoder_len * self.cnn_filters),
            BaselineKind::Lstm => lstm_in(self.n_features) + head(self.lstm_units),
            BaselineKind::CnnLstm => conv + lstm_in(self.cnn_filters) + head(self.lstm_units),
            BaselineKind::SeasonalNaive => 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    conv: Option<Linear>,
    lstm: Option<Lstm>,
    head: Option<Linear>,
}

/// A baseline with its parameters. Seasonal naive has none.
#[derive(Clone, Debug)]
pub struct BaselineModel<T> {
    pub config: BaselineConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

impl<T: Scalar> BaselineModel<T> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let uses_conv = matches!(c.kind, BaselineKind::Cnn | BaselineKind::CnnLstm);
        let conv = uses_conv
            .then(|| Linear::new(&mut p, "conv", c.cnn_kernel * c.n_features, c.cnn_filters, true, &mut rng))
            .transpose()?;
        let lstm = match c.kind {
            BaselineKind::Lstm => Some(Lstm::new(&mut p, "lstm", c.n_features, c.lstm_units, &mut rng)?),
            BaselineKind::CnnLstm => Some(Lstm::new(&mut p, "lstm", c.cnn_filters, c.lstm_units, &mut rng)?),
            _ => None,
        };
        let head_in = match c.kind {
            BaselineKind::Cnn => Some(c.encoder_len * c.cnn_filters),
            BaselineKind::Lstm | BaselineKind::CnnLstm => Some(c.lstm_units),
            BaselineKind::SeasonalNaive => None,
        };
        let head = head_in
            .map(|i| Linear::new(&mut p, "dense", i, c.horizon, true, &mut rng))
            .transpose()?;
        Ok(Self {
            config,
            params: p,
            layers: Layers { conv, lstm, head },
        })
    }

    fn encoder_tensor(&self, batch: &[&WindowSample]) -> Result<Tensor<T>> {
        let c = &self.config;
        let width = c.encoder_len * c.n_features;
        let mut data = Vec::with_capacity(batch.len() * width);
        for s in batch {
            if s.encoder.len() != width {
                return Err(BaselineError::Config(format!(
                    "window has {} encoder values, expected {width}",
                    s.encoder.len()
                )));
            }
            data.extend(s.encoder.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Ok(Tensor::new(vec![batch.len(), c.encoder_len, c.n_features], data)?)
    }

    /// Convolution output `[B, T, filters]` after ReLU.
    pub fn conv_features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let conv = self
            .layers
            .conv
            .as_ref()
            .ok_or_else(|| BaselineError::Config("model has no convolution".into()))?;
        let cols = g.im2col_same(x, self.config.cnn_kernel)?;
        let y = conv.forward(g, &self.params, cols)?;
        Ok(g.relu(y)?)
    }

    /// Scaled predictions `[B, horizon]` for trainable kinds.
    pub fn forward_graph(&self, g: &mut Graph<T>, batch: &[&WindowSample]) -> Result<Var> {
        let c = &self.config;
        let b = batch.len();
        let x = g.constant(self.encoder_tensor(batch)?)?;
        let features = match c.kind {
            BaselineKind::Cnn => {
                let y = self.conv_features(g, x)?;
                g.reshape(y, &[b, c.encoder_len * c.cnn_filters])?
            }
            BaselineKind::Lstm | BaselineKind::CnnLstm => {
                let seq = if c.kind == BaselineKind::CnnLstm {
                    self.conv_features(g, x)?
                } else {
                    x
                };
                let lstm = self.layers.lstm.as_ref().expect("lstm kinds have an lstm");
                let init = lstm.zero_state(g, b)?;
                let (_, state) = lstm.forward(g, &self.params, seq, init)?;
                state.h
            }
            BaselineKind::SeasonalNaive => {
                return Err(BaselineError::Config("seasonal naive has no graph".into()))
            }
        };
        let head = self.layers.head.as_ref().expect("trainable kinds have a head");
        Ok(head.forward(g, &self.params, features)?)
    }

    /// Dollar point forecasts for every window, flattened window-major.
    pub fn predict(&self, windows: &WindowSet, scalers: &ScalerSet) -> Result<Vec<f64>> {
        if self.config.kind == BaselineKind::SeasonalNaive {
            return Ok(windows
                .samples
                .iter()
                .flat_map(|s| seasonal_naive_forecast(s, self.config.horizon, scalers))
                .collect());
        }
        let mut out = Vec::with_capacity(windows.len() * self.config.horizon);
        for chunk in windows.samples.chunks(64) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let y = self.forward_graph(&mut g, &refs)?;
            out.extend(g.value(y).data().iter().map(|v| scalers.unscale_target(v.as_f64())));
        }
        Ok(out)
    }
}

impl<T: Scalar> Trainable<T> for BaselineModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[&WindowSample],
        _mode: Mode,
        _rng: &mut ChaCha8Rng,
    ) -> crate::train::Result<Var> {
        let pred = self
            .forward_graph(g, batch)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let h = self.config.horizon;
        let mut target = Vec::with_capacity(batch.len() * h);
        for s in batch {
            target.extend(s.target.iter().map(|&v| T::from_f64_lossy(v)));
        }
        let target = g.constant(Tensor::new(vec![batch.len(), h], target)?)?;
        Ok(g.mse_loss(pred, target)?)
    }
}

/// Same-week-last-year forecast: horizon step `h` repeats the target observed
/// 52 weeks before the forecast week, mapped back to dollars.
pub fn seasonal_naive_forecast(window: &WindowSample, horizon: usize, scalers: &ScalerSet) -> Vec<f64> {
    let enc_len = window.encoder.len() / ENCODER_FEATURES.len();
    (1..=horizon)
        .map(|h| scalers.unscale_target(window.encoder_target(enc_len - 52 + h - 1)))
        .collect()
}

/// Trains a baseline with the shared loop at the baseline's learning rate.
pub fn train_baseline<T: Scalar>(
    windows: &WindowSet,
    config: &BaselineConfig,
    train: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(BaselineModel<T>, Option<TrainHistory>)> {
    let mut model = BaselineModel::new(config.clone(), train.seed)?;
    if config.kind == BaselineKind::SeasonalNaive {
        return Ok((model, None));
    }
    let cfg = TrainConfig {
        learning_rate: config.learning_rate,
        ..train.clone()
    };
    let history = fit(&mut model, windows, &cfg, observer)?;
    Ok((model, Some(history)))
}

/// `(store, origin_t, 1-based horizon step)`.
pub type PredictionKey = (u32, u32, usize);

/// Point forecasts of one model, keyed by prediction point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointForecasts {
    pub name: String,
    pub values: BTreeMap<PredictionKey, f64>,
}

impl PointForecasts {
    /// Pairs flattened window-major predictions with the windows' keys.
    pub fn from_windows(name: impl Into<String>, windows: &WindowSet, values: &[f64]) -> Result<Self> {
        let keys = windows.prediction_keys();
        if keys.len() != values.len() {
            return Err(BaselineError::ProtocolMismatch(format!(
                "{} predictions for {} points",
                values.len(),
                keys.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            values: keys.into_iter().zip(values.iter().copied()).collect(),
        })
    }

    pub fn from_quantiles(name: impl Into<String>, forecast: &QuantileForecast) -> Self {
        let mid = forecast.levels.len() / 2;
        Self {
            name: name.into(),
            values: forecast
                .rows
                .iter()
                .map(|r| ((r.store, r.origin_t, r.horizon), r.values[mid]))
                .collect(),
        }
    }
}

/// Reads `store,origin_t,horizon,prediction` rows (dollars).
pub fn read_external_forecasts(path: &Path, name: impl Into<String>) -> Result<PointForecasts> {
    let ext = |m: String| BaselineError::External(format!("{}: {m}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ext(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ext(e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ext(format!("missing column {name}")))
    };
    let (cs, co, ch, cp) = (col("store")?, col("origin_t")?, col("horizon")?, col("prediction")?);
    let mut values = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| ext(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let bad = |c: usize| ext(format!("row {} has bad value {:?}", i + 1, field(c)));
        let key = (
            field(cs).parse().map_err(|_| bad(cs))?,
            field(co).parse().map_err(|_| bad(co))?,
            field(ch).parse().map_err(|_| bad(ch))?,
        );
        let v: f64 = field(cp).parse().map_err(|_| bad(cp))?;
        if values.insert(key, v).is_some() {
            return Err(ext(format!("duplicate prediction for {key:?}")));
        }
    }
    Ok(PointForecasts {
        name: name.into(),
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("Model,RMSE,MAE,R2,SMAPE\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.4},{:.2}%",
                r.model, m.rmse, m.mae, m.r2, m.smape
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Scores every model on exactly the prediction points of `test`.
pub fn compare_models(test: &WindowSet, models: &[PointForecasts]) -> Result<ComparisonTable> {
    let keys = test.prediction_keys();
    let expected: BTreeSet<PredictionKey> = keys.iter().copied().collect();
    let actual_by_key: BTreeMap<PredictionKey, f64> = test
        .samples
        .iter()
        .flat_map(|s| {
            s.actual
                .iter()
                .enumerate()
                .map(move |(h, &a)| ((s.store, s.origin_t, h + 1), a))
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        if !seen.insert(m.name.clone()) {
            return Err(BaselineError::DuplicateModel(m.name.clone()));
        }
        let have: BTreeSet<PredictionKey> = m.values.keys().copied().collect();
        if have != expected {
            let missing = expected.difference(&have).count();
            let extra = have.difference(&expected).count();
            return Err(BaselineError::ProtocolMismatch(format!(
                "{}: {missing} test points missing, {extra} points outside the test set",
                m.name
            )));
        }
        let pred: Vec<f64> = keys.iter().map(|k| m.values[k]).collect();
        let actual: Vec<f64> = keys.iter().map(|k| actual_by_key[k]).collect();
        rows.push(ComparisonRow {
            model: m.name.clone(),
            metrics: compute_metrics(&pred, &actual)?,
        });
    }
    Ok(ComparisonTable { rows })
}

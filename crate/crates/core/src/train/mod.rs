//! Quantile loss, Adam, the mini-batch training loop, and chronological
//! cross-validation.

mod cv;
mod optim;

pub use cv::{run_cv, CvConfig, CvReport, FoldResult, MetricSummary};
pub use optim::{Adam, EarlyStopping, PlateauScheduler, StepStats};

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evalx::EvalError;
use crate::ingest::{IngestError, ScalerSet, WindowSample, WindowSet};
use crate::tensor::{Graph, ParamStore, Scalar, TensorError, Var};
use crate::tft::{
    predict_intervals, BatchInputs, Mode, ModelOutput, QuantileForecast, TftConfig, TftError,
    TftModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training windows")]
    NoWindows,
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] TftError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub grad_clip_norm: f64,
    /// Share of each store's training origins held back as inner validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 0.01,
            max_epochs: 100,
            early_stop_patience: 10,
            plateau_factor: 0.5,
            plateau_patience: 5,
            grad_clip_norm: 1.0,
            validation_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be at least 1");
        }
        if self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("gradient clip norm must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Pinball loss `max(q·e, (q−1)·e)` with `e = target − pred`, averaged over
/// every element of `pred` (`[..., Q]`).
pub fn quantile_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    quantiles: &[f64],
) -> Result<Var> {
    Ok(g.pinball_loss(pred, target, quantiles)?)
}

pub fn pinball(q: f64, error: f64) -> f64 {
    (q * error).max((q - 1.0) * error)
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Learning rate used during each epoch.
    pub lr: Vec<f64>,
    pub seconds: Vec<f64>,
    /// Largest post-clip gradient norm seen during each epoch.
    pub max_grad_norm: Vec<f64>,
    /// 0-based epoch with the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// `epoch,train_loss,val_loss,lr,seconds` with 1-based epochs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for i in 0..self.epochs() {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:.3}",
                i + 1,
                self.train_loss[i],
                self.val_loss[i],
                self.lr[i],
                self.seconds[i]
            );
        }
        out
    }
}

/// Summary passed to progress observers after each epoch.
#[derive(Copy, Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// A model the shared loop can fit: it exposes its parameters and builds a
/// scalar loss for a batch of windows.
pub trait Trainable<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &[&WindowSample],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var>;
}

impl<T: Scalar> Trainable<T> for TftModel<T> {
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
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let inputs: BatchInputs<T> = self.batch_inputs(batch)?;
        let vars = self.forward_graph(g, &inputs, mode, rng)?;
        let target = g.constant(inputs.target)?;
        quantile_loss(g, vars.quantiles, target, &self.config.quantiles)
    }
}

/// Splits windows into inner training and validation sets.
///
/// Per store, the last `⌈n·fraction⌉` origins validate. Training windows whose
/// forecast weeks reach the first validation forecast week are dropped so the
/// two sets never share target weeks. Stores with fewer than two windows
/// train only.
pub fn inner_split(windows: &WindowSet, fraction: f64) -> (Vec<WindowSample>, Vec<WindowSample>) {
    let mut by_store: std::collections::BTreeMap<usize, Vec<&WindowSample>> = Default::default();
    for s in &windows.samples {
        by_store.entry(s.store_index).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut list) in by_store {
        list.sort_by_key(|s| s.origin_t);
        let n = list.len();
        if n < 2 {
            train.extend(list.into_iter().cloned());
            continue;
        }
        let n_val = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
        let first_val_week = list[n - n_val].origin_t + 1;
        let horizon = windows.horizon as u32;
        for (i, s) in list.into_iter().enumerate() {
            if i >= n - n_val {
                val.push(s.clone());
            } else if s.origin_t + horizon < first_val_week {
                train.push(s.clone());
            }
        }
    }
    (train, val)
}

fn mean_loss<T: Scalar, M: Trainable<T>>(
    model: &M,
    samples: &[WindowSample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let loss = model.batch_loss(&mut g, &refs, Mode::Eval, rng)?;
        total += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Shared mini-batch loop: seeded shuffling, Adam with clipping, plateau
/// learning-rate decay and early stopping on the inner validation loss.
/// Leaves `model` holding the parameters of the best validation epoch.
pub fn fit<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    windows: &WindowSet,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let (train, val) = inner_split(windows, cfg.validation_fraction);
    if train.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let val = if val.is_empty() { train.clone() } else { val };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(model.params(), Some(cfg.grad_clip_norm));
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best: Option<ParamStore<T>> = None;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut max_norm: f64 = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = match model.batch_loss(&mut g, &batch, Mode::Train, &mut rng) {
                Err(TrainError::Tensor(TensorError::NonFiniteResult { .. }))
                | Err(TrainError::Model(TftError::Tensor(TensorError::NonFiniteResult { .. }))) => {
                    return Err(TrainError::DivergedLoss { epoch: epoch + 1 })
                }
                other => other?,
            };
            sum += g.value(loss).data()[0].as_f64() * batch.len() as f64;
            let mut grads = g.backward(loss)?.param_grads(model.params());
            let stats = adam.step(model.params_mut(), &mut grads, lr);
            if !stats.pre_clip_norm.is_finite() {
                return Err(TrainError::DivergedLoss { epoch: epoch + 1 });
            }
            max_norm = max_norm.max(stats.post_clip_norm);
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = mean_loss(model, &val, cfg.batch_size.max(64), &mut eval_rng)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::DivergedLoss { epoch: epoch + 1 });
        }
        sched.observe(val_loss);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = Some(model.params().clone());
        }
        let seconds = start.elapsed().as_secs_f64();
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.lr.push(lr);
        history.seconds.push(seconds);
        history.max_grad_norm.push(max_norm);
        observer(&EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            lr,
            seconds,
        });
        if stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    if let Some(p) = best {
        *model.params_mut() = p;
    }
    Ok(history)
}

/// Trains a fresh TFT on `windows`.
pub fn train_model<T: Scalar>(
    windows: &WindowSet,
    tft_config: &TftConfig,
    train_config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(TftModel<T>, TrainHistory)> {
    let mut model = TftModel::new(tft_config.clone(), train_config.seed)?;
    let history = fit(&mut model, windows, train_config, observer)?;
    Ok((model, history))
}

/// Eval-mode forecasts in dollars for every window, plus the raw outputs.
pub fn forecast_windows<T: Scalar>(
    model: &TftModel<T>,
    windows: &WindowSet,
    scalers: &ScalerSet,
) -> Result<(QuantileForecast, ModelOutput)> {
    let output = model.predict_all(&windows.samples, 64)?;
    let forecast = predict_intervals(&output, &windows.samples, &model.config.quantiles, scalers)?;
    Ok((forecast, output))
}

/// Draws a seed for a sub-run from a parent seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9))).random()
}

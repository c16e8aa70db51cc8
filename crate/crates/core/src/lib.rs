//! Multi-horizon probabilistic forecasting of weekly retail sales with a
//! Temporal Fusion Transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and reverse-mode differentiation
//! - [`nn`]: linear and LSTM layers shared by every model
//! - [`ingest`]: CSV parsing, descriptive statistics, scaling, windowing, folds
//! - [`tft`]: the Temporal Fusion Transformer and its checkpoint format
//! - [`train`]: quantile loss, Adam, the training loop, and cross-validation
//! - [`baselines`]: CNN, LSTM, CNN-LSTM, and seasonal-naive comparators
//! - [`evalx`]: dollar-space metrics, interval calibration, interpretability
//! - [`synth`]: a deterministic synthetic panel with the same layout as the
//!   reference dataset

pub mod tensor;
pub mod nn;
pub mod ingest;
pub mod tft;
pub mod train;
pub mod baselines;
pub mod evalx;
pub mod synth;

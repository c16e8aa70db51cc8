//! Temporal Fusion Transformer.
//!
//! Data flow for one batch:
//!
//! 1. store embedding → four static GRNs (selection, LSTM h₀, LSTM c₀,
//!    enrichment contexts)
//! 2. encoder and decoder variable selection, conditioned on the selection
//!    context
//! 3. LSTM encoder over the 52 history steps from the static initial state;
//!    LSTM decoder continues over the 5 forecast steps
//! 4. gate-add-norm against the selected inputs, then static enrichment
//! 5. interpretable multi-head attention from the decoder steps over all 57
//!    positions with a causal mask, gate-add-norm, position-wise GRN
//! 6. final gate-add-norm against the decoder LSTM features and a linear
//!    quantile head

mod blocks;
mod checkpoint;
mod forecast;

pub use blocks::{GateAddNorm, Glu, Grn, InterpretableAttention, VariableSelection};
pub use checkpoint::{
    checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
    MANIFEST_FILE, PARAMS_FILE,
};
pub use forecast::{predict_intervals, repair_and_unscale, ForecastRow, QuantileForecast};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::{WindowSample, DECODER_FEATURES, ENCODER_FEATURES};
use crate::nn::{Linear, Lstm, LstmState};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TftError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch does not match the model: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TftError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TftConfig {
    pub hidden_size: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub encoder_len: usize,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    pub n_static_categories: usize,
    pub n_encoder_vars: usize,
    pub n_decoder_vars: usize,
    pub lstm_layers: usize,
}

impl Default for TftConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            attention_heads: 4,
            dropout: 0.2,
            encoder_len: 52,
            horizon: 5,
            quantiles: vec![0.1, 0.5, 0.9],
            n_static_categories: 45,
            n_encoder_vars: ENCODER_FEATURES.len(),
            n_decoder_vars: DECODER_FEATURES.len(),
            lstm_layers: 1,
        }
    }
}

impl TftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TftError::Config(m));
        if self.hidden_size == 0 || self.attention_heads == 0 {
            return bad("hidden size and head count must be positive".into());
        }
        if self.hidden_size % self.attention_heads != 0 {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.attention_heads
            ));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "quantiles {:?} must be strictly increasing inside (0, 1)",
                self.quantiles
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.encoder_len == 0 || self.horizon == 0 {
            return bad("encoder length and horizon must be positive".into());
        }
        if self.n_static_categories == 0 || self.n_encoder_vars == 0 || self.n_decoder_vars == 0 {
            return bad("variable and category counts must be positive".into());
        }
        if self.lstm_layers != 1 {
            return bad(format!("{} LSTM layers requested; only 1 is supported", self.lstm_layers));
        }
        Ok(())
    }

    /// Exact number of scalar parameters:
    ///
    /// ```text
    /// C·H                                  store embedding
    /// + 4·GRN(H→H)                         static contexts
    /// + VSN(Ve) + VSN(Vd)                  variable selection
    /// + 2·4·(H·2H + H)                     encoder and decoder LSTMs
    /// + 3·(2·(H² + H) + 2H)                post-LSTM, post-attention, final gates
    /// + GRN(H→H | ctx H) + GRN(H→H)        enrichment, position-wise
    /// + n·2·(H·d + d) + (H·d + d) + (d·H + H)   attention, d = H/n
    /// + H·Q + Q                            quantile head
    ///
    /// GRN(i→o | ctx c) = (i·H + H) + c·H + (H·o + o) + 2·(o² + o) + [i≠o](i·o + o) + 2o
    /// VSN(V) = V·2H + V·GRN(H→H) + GRN(V·H→V | ctx H)
    /// ```
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_size;
        let q = self.quantiles.len();
        self.n_static_categories * h
            + 4 * Grn::num_params(h, h, h, None)
            + VariableSelection::num_params(self.n_encoder_vars, h)
            + VariableSelection::num_params(self.n_decoder_vars, h)
            + 2 * Lstm::num_params(h, h)
            + 3 * (2 * Linear::num_params(h, h, true) + 2 * h)
            + Grn::num_params(h, h, h, Some(h))
            + Grn::num_params(h, h, h, None)
            + InterpretableAttention::num_params(h, self.attention_heads)
            + Linear::num_params(h, q, true)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Layers {
    embedding: ParamId,
    static_selection: Grn,
    static_hidden: Grn,
    static_cell: Grn,
    static_enrichment: Grn,
    encoder_selection: VariableSelection,
    decoder_selection: VariableSelection,
    encoder_lstm: Lstm,
    decoder_lstm: Lstm,
    post_lstm: GateAddNorm,
    enrichment: Grn,
    attention: InterpretableAttention,
    post_attention: GateAddNorm,
    positionwise: Grn,
    final_gate: GateAddNorm,
    head: Linear,
}

/// A TFT configuration with its named parameters.
#[derive(Clone, Debug)]
pub struct TftModel<T> {
    pub config: TftConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Graph handles produced by [`TftModel::forward_graph`].
#[derive(Copy, Clone, Debug)]
pub struct ForwardVars {
    /// `[B, horizon, Q]` in scaled target space.
    pub quantiles: Var,
    /// `[B, horizon, encoder_len + horizon]`.
    pub attention: Var,
    /// `[B, encoder_len, n_encoder_vars]`.
    pub encoder_weights: Var,
    /// `[B, horizon, n_decoder_vars]`.
    pub decoder_weights: Var,
}

/// Plain-value outputs of an inference pass, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub batch: usize,
    pub horizon: usize,
    pub encoder_len: usize,
    pub n_quantiles: usize,
    pub n_encoder_vars: usize,
    pub n_decoder_vars: usize,
    pub quantiles: Vec<f64>,
    pub attention: Vec<f64>,
    pub encoder_weights: Vec<f64>,
    pub decoder_weights: Vec<f64>,
}

impl ModelOutput {
    pub fn quantile(&self, sample: usize, step: usize, q: usize) -> f64 {
        self.quantiles[(sample * self.horizon + step) * self.n_quantiles + q]
    }

    /// Attention row of decoder step `step` over all positions.
    pub fn attention_row(&self, sample: usize, step: usize) -> &[f64] {
        let k = self.encoder_len + self.horizon;
        let start = (sample * self.horizon + step) * k;
        &self.attention[start..start + k]
    }

    /// Concatenates outputs of consecutive batches.
    pub fn concat(parts: &[ModelOutput]) -> Option<ModelOutput> {
        let first = parts.first()?;
        let mut out = ModelOutput {
            batch: 0,
            quantiles: Vec::new(),
            attention: Vec::new(),
            encoder_weights: Vec::new(),
            decoder_weights: Vec::new(),
            ..first.clone()
        };
        for p in parts {
            out.batch += p.batch;
            out.quantiles.extend_from_slice(&p.quantiles);
            out.attention.extend_from_slice(&p.attention);
            out.encoder_weights.extend_from_slice(&p.encoder_weights);
            out.decoder_weights.extend_from_slice(&p.decoder_weights);
        }
        Some(out)
    }
}

/// Batched model inputs.
pub struct BatchInputs<T> {
    pub encoder: Tensor<T>,
    pub decoder: Tensor<T>,
    pub target: Tensor<T>,
    pub stores: Vec<usize>,
}

impl<T: Scalar> BatchInputs<T> {
    pub fn from_samples(
        samples: &[&WindowSample],
        encoder_len: usize,
        horizon: usize,
        n_enc: usize,
        n_dec: usize,
    ) -> Result<Self> {
        let b = samples.len();
        if b == 0 {
            return Err(TftError::ShapeMismatch("empty batch".into()));
        }
        let mut enc = Vec::with_capacity(b * encoder_len * n_enc);
        let mut dec = Vec::with_capacity(b * horizon * n_dec);
        let mut tgt = Vec::with_capacity(b * horizon);
        let mut stores = Vec::with_capacity(b);
        for s in samples {
            if s.encoder.len() != encoder_len * n_enc
                || s.decoder.len() != horizon * n_dec
                || s.target.len() != horizon
            {
                return Err(TftError::ShapeMismatch(format!(
                    "window of store {} at {} has {}/{}/{} encoder/decoder/target values, \
                     expected {}/{}/{}",
                    s.store,
                    s.origin_t,
                    s.encoder.len(),
                    s.decoder.len(),
                    s.target.len(),
                    encoder_len * n_enc,
                    horizon * n_dec,
                    horizon
                )));
            }
            enc.extend(s.encoder.iter().map(|&v| T::from_f64_lossy(v)));
            dec.extend(s.decoder.iter().map(|&v| T::from_f64_lossy(v)));
            tgt.extend(s.target.iter().map(|&v| T::from_f64_lossy(v)));
            stores.push(s.store_index);
        }
        Ok(Self {
            encoder: Tensor::new(vec![b, encoder_len, n_enc], enc)?,
            decoder: Tensor::new(vec![b, horizon, n_dec], dec)?,
            target: Tensor::new(vec![b, horizon], tgt)?,
            stores,
        })
    }
}

impl<T: Scalar> TftModel<T> {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(config: TftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let h = config.hidden_size;
        let r = &mut rng;
        let embedding = p.add(
            "static.embedding",
            Tensor::glorot_uniform(&[config.n_static_categories, h], r),
        )?;
        let layers = Layers {
            embedding,
            static_selection: Grn::new(&mut p, "static.selection", h, h, h, None, r)?,
            static_hidden: Grn::new(&mut p, "static.hidden", h, h, h, None, r)?,
            static_cell: Grn::new(&mut p, "static.cell", h, h, h, None, r)?,
            static_enrichment: Grn::new(&mut p, "static.enrichment", h, h, h, None, r)?,
            encoder_selection: VariableSelection::new(&mut p, "encoder_vsn", config.n_encoder_vars, h, r)?,
            decoder_selection: VariableSelection::new(&mut p, "decoder_vsn", config.n_decoder_vars, h, r)?,
            encoder_lstm: Lstm::new(&mut p, "encoder_lstm", h, h, r)?,
            decoder_lstm: Lstm::new(&mut p, "decoder_lstm", h, h, r)?,
            post_lstm: GateAddNorm::new(&mut p, "post_lstm", h, r)?,
            enrichment: Grn::new(&mut p, "enrichment", h, h, h, Some(h), r)?,
            attention: InterpretableAttention::new(&mut p, "attention", h, config.attention_heads, r)?,
            post_attention: GateAddNorm::new(&mut p, "post_attention", h, r)?,
            positionwise: Grn::new(&mut p, "positionwise", h, h, h, None, r)?,
            final_gate: GateAddNorm::new(&mut p, "final_gate", h, r)?,
            head: Linear::new(&mut p, "quantile_head", h, config.quantiles.len(), true, r)?,
        };
        Ok(Self {
            config,
            params: p,
            layers,
        })
    }

    /// Same architecture and values in another element type.
    pub fn cast<U: Scalar>(&self) -> TftModel<U> {
        TftModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn batch_inputs(&self, samples: &[&WindowSample]) -> Result<BatchInputs<T>> {
        let c = &self.config;
        let inputs = BatchInputs::from_samples(
            samples,
            c.encoder_len,
            c.horizon,
            c.n_encoder_vars,
            c.n_decoder_vars,
        )?;
        if let Some(&bad) = inputs.stores.iter().find(|&&s| s >= c.n_static_categories) {
            return Err(TftError::ShapeMismatch(format!(
                "store index {bad} outside {} categories",
                c.n_static_categories
            )));
        }
        Ok(inputs)
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        inputs: &BatchInputs<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let l = &self.layers;
        let p = &self.params;
        let train = mode == Mode::Train;
        let drop = c.dropout;
        let (enc_len, hor) = (c.encoder_len, c.horizon);
        let total = enc_len + hor;

        let table = g.param(p, l.embedding)?;
        let emb = g.embedding(table, &inputs.stores)?;
        let ctx_sel = l.static_selection.forward(g, p, emb, None, drop, train, rng)?;
        let ctx_h = l.static_hidden.forward(g, p, emb, None, drop, train, rng)?;
        let ctx_c = l.static_cell.forward(g, p, emb, None, drop, train, rng)?;
        let ctx_enr = l.static_enrichment.forward(g, p, emb, None, drop, train, rng)?;

        let x_enc = g.constant(inputs.encoder.clone())?;
        let x_dec = g.constant(inputs.decoder.clone())?;
        let sel_enc_ctx = g.expand(ctx_sel, 1, enc_len)?;
        let sel_dec_ctx = g.expand(ctx_sel, 1, hor)?;
        let (xi_enc, w_enc) = l
            .encoder_selection
            .forward(g, p, x_enc, sel_enc_ctx, drop, train, rng)?;
        let (xi_dec, w_dec) = l
            .decoder_selection
            .forward(g, p, x_dec, sel_dec_ctx, drop, train, rng)?;

        let init = LstmState { h: ctx_h, c: ctx_c };
        let (h_enc, state) = l.encoder_lstm.forward(g, p, xi_enc, init)?;
        let (h_dec, _) = l.decoder_lstm.forward(g, p, xi_dec, state)?;
        let lstm_out = g.concat(&[h_enc, h_dec], 1)?;
        let selected = g.concat(&[xi_enc, xi_dec], 1)?;
        let temporal = l
            .post_lstm
            .forward(g, p, lstm_out, selected, drop, train, rng)?;

        let enr_ctx = g.expand(ctx_enr, 1, total)?;
        let enriched = l
            .enrichment
            .forward(g, p, temporal, Some(enr_ctx), drop, train, rng)?;

        let queries = g.slice(enriched, 1, enc_len, hor)?;
        let mask = InterpretableAttention::causal_mask(hor, total, enc_len);
        let (attended, attn_weights) = l
            .attention
            .forward(g, p, queries, enriched, mask, drop, train, rng)?;
        let attended = l
            .post_attention
            .forward(g, p, attended, queries, drop, train, rng)?;
        let pos = l.positionwise.forward(g, p, attended, None, drop, train, rng)?;
        let temporal_dec = g.slice(temporal, 1, enc_len, hor)?;
        let fused = l
            .final_gate
            .forward(g, p, pos, temporal_dec, 0.0, train, rng)?;
        let quantiles = l.head.forward(g, p, fused)?;
        debug_assert_eq!(g.shape(quantiles), &[inputs.stores.len(), hor, c.quantiles.len()]);
        Ok(ForwardVars {
            quantiles,
            attention: attn_weights,
            encoder_weights: w_enc,
            decoder_weights: w_dec,
        })
    }

    /// Eval-mode forward over a batch, returning plain values.
    pub fn predict(&self, samples: &[&WindowSample]) -> Result<ModelOutput> {
        let inputs = self.batch_inputs(samples)?;
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward_graph(&mut g, &inputs, Mode::Eval, &mut rng)?;
        Ok(self.collect_output(&g, &vars, samples.len()))
    }

    /// Eval-mode forward in chunks of `batch_size`.
    pub fn predict_all(&self, samples: &[WindowSample], batch_size: usize) -> Result<ModelOutput> {
        let parts = samples
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let refs: Vec<&WindowSample> = chunk.iter().collect();
                self.predict(&refs)
            })
            .collect::<Result<Vec<_>>>()?;
        ModelOutput::concat(&parts).ok_or_else(|| TftError::ShapeMismatch("no windows".into()))
    }

    pub fn collect_output(&self, g: &Graph<T>, vars: &ForwardVars, batch: usize) -> ModelOutput {
        let c = &self.config;
        ModelOutput {
            batch,
            horizon: c.horizon,
            encoder_len: c.encoder_len,
            n_quantiles: c.quantiles.len(),
            n_encoder_vars: c.n_encoder_vars,
            n_decoder_vars: c.n_decoder_vars,
            quantiles: g.value(vars.quantiles).to_f64_vec(),
            attention: g.value(vars.attention).to_f64_vec(),
            encoder_weights: g.value(vars.encoder_weights).to_f64_vec(),
            decoder_weights: g.value(vars.decoder_weights).to_f64_vec(),
        }
    }
}


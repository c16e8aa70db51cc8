//! Gating, residual, variable-selection, and attention blocks.

use std::sync::Arc;

use rand::Rng;

use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Result, Scalar, Var};

/// Gated linear unit: `σ(x·W_g + b_g) ⊙ (x·W_v + b_v)`.
#[derive(Clone, Debug)]
pub struct Glu {
    value: Linear,
    gate: Linear,
}

impl Glu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            value: Linear::new(store, &format!("{name}.value"), in_dim, out_dim, true, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), in_dim, out_dim, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let v = self.value.forward(g, store, x)?;
        let gate = self.gate.forward(g, store, x)?;
        let gate = g.sigmoid(gate)?;
        g.mul(gate, v)
    }
}

/// `LayerNorm(residual + GLU(dropout(x)))`.
#[derive(Clone, Debug)]
pub struct GateAddNorm {
    glu: Glu,
    norm: LayerNorm,
}

impl GateAddNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            glu: Glu::new(store, &format!("{name}.glu"), dim, dim, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        residual: Var,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let x = g.dropout(x, dropout, train, rng)?;
        let gated = self.glu.forward(g, store, x)?;
        let sum = g.add(gated, residual)?;
        self.norm.forward(g, store, sum)
    }
}

/// Gated residual network.
///
/// `a₁ = ELU(x·W₁ + c·W_c + b₁)`, `a₂ = a₁·W₂ + b₂`, then
/// `LayerNorm(skip(x) + GLU(dropout(a₂)))` where `skip` is the identity when
/// input and output widths agree and a linear projection otherwise.
#[derive(Clone, Debug)]
pub struct Grn {
    fc1: Linear,
    context: Option<Linear>,
    fc2: Linear,
    glu: Glu,
    skip: Option<Linear>,
    norm: LayerNorm,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Grn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        context_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?;
        let context = context_dim
            .map(|c| Linear::new(store, &format!("{name}.context"), c, hidden, false, rng))
            .transpose()?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng)?;
        let glu = Glu::new(store, &format!("{name}.glu"), out_dim, out_dim, rng)?;
        let skip = (in_dim != out_dim)
            .then(|| Linear::new(store, &format!("{name}.skip"), in_dim, out_dim, true, rng))
            .transpose()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), out_dim)?;
        Ok(Self {
            fc1,
            context,
            fc2,
            glu,
            skip,
            norm,
            in_dim,
            out_dim,
        })
    }

    /// Closed-form parameter count.
    pub fn num_params(in_dim: usize, hidden: usize, out_dim: usize, context_dim: Option<usize>) -> usize {
        Linear::num_params(in_dim, hidden, true)
            + context_dim.map_or(0, |c| Linear::num_params(c, hidden, false))
            + Linear::num_params(hidden, out_dim, true)
            + 2 * Linear::num_params(out_dim, out_dim, true)
            + if in_dim != out_dim { Linear::num_params(in_dim, out_dim, true) } else { 0 }
            + 2 * out_dim
    }

    /// `context`, when the block was built with one, must match `x` in every
    /// dimension but the last.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut a = self.fc1.forward(g, store, x)?;
        match (&self.context, context) {
            (Some(proj), Some(c)) => {
                let c = proj.forward(g, store, c)?;
                a = g.add(a, c)?;
            }
            (None, None) => {}
            (Some(_), None) | (None, Some(_)) => {
                return Err(crate::tensor::TensorError::InvalidArgument {
                    op: "grn",
                    detail: "context supplied iff the block was built with one".into(),
                })
            }
        }
        let a = g.elu(a)?;
        let a = self.fc2.forward(g, store, a)?;
        let a = g.dropout(a, dropout, train, rng)?;
        let gated = self.glu.forward(g, store, a)?;
        let residual = match &self.skip {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        let sum = g.add(gated, residual)?;
        self.norm.forward(g, store, sum)
    }
}

/// Variable selection over `V` scalar inputs per time step.
///
/// Each input is projected to the hidden width and passed through its own
/// GRN; a GRN over the concatenated projections (conditioned on the static
/// context) yields softmax weights that mix the per-variable outputs.
#[derive(Clone, Debug)]
pub struct VariableSelection {
    projections: Vec<Linear>,
    var_grns: Vec<Grn>,
    weight_grn: Grn,
    hidden: usize,
}

impl VariableSelection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n_vars: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut projections = Vec::with_capacity(n_vars);
        let mut var_grns = Vec::with_capacity(n_vars);
        for v in 0..n_vars {
            projections.push(Linear::new(store, &format!("{name}.proj{v}"), 1, hidden, true, rng)?);
        }
        for v in 0..n_vars {
            var_grns.push(Grn::new(store, &format!("{name}.grn{v}"), hidden, hidden, hidden, None, rng)?);
        }
        let weight_grn = Grn::new(
            store,
            &format!("{name}.weights"),
            n_vars * hidden,
            hidden,
            n_vars,
            Some(hidden),
            rng,
        )?;
        Ok(Self {
            projections,
            var_grns,
            weight_grn,
            hidden,
        })
    }

    pub fn num_params(n_vars: usize, hidden: usize) -> usize {
        n_vars * Linear::num_params(1, hidden, true)
            + n_vars * Grn::num_params(hidden, hidden, hidden, None)
            + Grn::num_params(n_vars * hidden, hidden, n_vars, Some(hidden))
    }

    pub fn n_vars(&self) -> usize {
        self.projections.len()
    }

    /// `x` is `[B, T, V]`, `context` is `[B, T, H]`.
    /// Returns the mixed embedding `[B, T, H]` and the weights `[B, T, V]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Var,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let v = self.n_vars();
        if shape.len() != 3 || shape[2] != v {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "variable_select",
                detail: format!("input {shape:?} for {v} variables"),
            });
        }
        let (b, t, h) = (shape[0], shape[1], self.hidden);
        let mut embedded = Vec::with_capacity(v);
        for (i, proj) in self.projections.iter().enumerate() {
            let xi = g.slice(x, 2, i, 1)?;
            embedded.push(proj.forward(g, store, xi)?);
        }
        let flat = g.concat(&embedded, 2)?;
        let logits = self
            .weight_grn
            .forward(g, store, flat, Some(context), dropout, train, rng)?;
        let weights = g.softmax(logits, None)?;

        let mut transformed = Vec::with_capacity(v);
        for (grn, &e) in self.var_grns.iter().zip(&embedded) {
            let y = grn.forward(g, store, e, None, dropout, train, rng)?;
            transformed.push(g.reshape(y, &[b * t, 1, h])?);
        }
        let stacked = g.concat(&transformed, 1)?;
        let w = g.reshape(weights, &[b * t, 1, v])?;
        let mixed = g.bmm(w, stacked, false)?;
        let mixed = g.reshape(mixed, &[b, t, h])?;
        Ok((mixed, weights))
    }
}

/// Multi-head attention with per-head query/key projections and one value
/// projection shared by all heads; head attention matrices are averaged
/// before being applied to the shared values.
#[derive(Clone, Debug)]
pub struct InterpretableAttention {
    queries: Vec<Linear>,
    keys: Vec<Linear>,
    value: Linear,
    output: Linear,
    head_dim: usize,
}

impl InterpretableAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head_dim = hidden / heads;
        let mut queries = Vec::with_capacity(heads);
        let mut keys = Vec::with_capacity(heads);
        for hd in 0..heads {
            queries.push(Linear::new(store, &format!("{name}.query{hd}"), hidden, head_dim, true, rng)?);
            keys.push(Linear::new(store, &format!("{name}.key{hd}"), hidden, head_dim, true, rng)?);
        }
        Ok(Self {
            queries,
            keys,
            value: Linear::new(store, &format!("{name}.value"), hidden, head_dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), head_dim, hidden, true, rng)?,
            head_dim,
        })
    }

    pub fn num_params(hidden: usize, heads: usize) -> usize {
        let d = hidden / heads;
        heads * 2 * Linear::num_params(hidden, d, true)
            + Linear::num_params(hidden, d, true)
            + Linear::num_params(d, hidden, true)
    }

    /// Keep-mask for `queries` rows that sit at absolute positions
    /// `first_query..first_query+queries` over `keys` positions: a query
    /// sees every key at or before its own position.
    pub fn causal_mask(queries: usize, keys: usize, first_query: usize) -> Arc<[bool]> {
        (0..queries)
            .flat_map(|q| (0..keys).map(move |k| k <= first_query + q))
            .collect::<Vec<_>>()
            .into()
    }

    /// `query_in` is `[B, Q, H]`, `key_in` is `[B, K, H]`. Returns the
    /// projected output `[B, Q, H]` and averaged weights `[B, Q, K]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query_in: Var,
        key_in: Var,
        mask: Arc<[bool]>,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut avg: Option<Var> = None;
        for (wq, wk) in self.queries.iter().zip(&self.keys) {
            let q = wq.forward(g, store, query_in)?;
            let k = wk.forward(g, store, key_in)?;
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, scale)?;
            let w = g.softmax(scores, Some(mask.clone()))?;
            avg = Some(match avg {
                Some(acc) => g.add(acc, w)?,
                None => w,
            });
        }
        let weights = g.scale(avg.expect("at least one head"), 1.0 / self.queries.len() as f64)?;
        let applied = g.dropout(weights, dropout, train, rng)?;
        let v = self.value.forward(g, store, key_in)?;
        let mixed = g.bmm(applied, v, false)?;
        let out = self.output.forward(g, store, mixed)?;
        Ok((out, weights))
    }
}

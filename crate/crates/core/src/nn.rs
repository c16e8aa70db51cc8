//! Parameterised building blocks shared by the TFT and the baselines.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};

/// Affine map `x · W + b` applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::glorot_uniform(&[in_dim, out_dim], rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned scale (init 1) and shift (init 0).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Single-layer LSTM with gate order input, forget, cell, output and one
/// bias vector.
#[derive(Clone, Debug)]
pub struct Lstm {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[B, H]`.
#[derive(Copy, Clone, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            Tensor::glorot_uniform(&[input, 4 * hidden], rng),
        )?;
        let w_hh = store.add(
            format!("{name}.w_hh"),
            Tensor::glorot_uniform(&[hidden, 4 * hidden], rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]))?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        4 * (hidden * (input + hidden) + hidden)
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, batch: usize) -> Result<LstmState> {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]))?;
        let c = g.constant(Tensor::zeros(&[batch, self.hidden]))?;
        Ok(LstmState { h, c })
    }

    /// One step from pre-projected input gates `x_t · W_ih + b`, `[B, 4H]`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        gates_x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let h = self.hidden;
        let w_hh = g.param(store, self.w_hh)?;
        let rec = g.matmul(state.h, w_hh)?;
        let gates = g.add(gates_x, rec)?;
        let axis = g.shape(gates).len() - 1;
        let i = g.slice(gates, axis, 0, h)?;
        let f = g.slice(gates, axis, h, h)?;
        let c_hat = g.slice(gates, axis, 2 * h, h)?;
        let o = g.slice(gates, axis, 3 * h, h)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let c_hat = g.tanh(c_hat)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, c_hat)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs over `[B, T, input]` and returns all hidden states `[B, T, H]`
    /// plus the final state.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        init: LstmState,
    ) -> Result<(Var, LstmState)> {
        let shape = g.shape(x).to_vec();
        let (batch, steps) = (shape[0], shape[1]);
        let w_ih = g.param(store, self.w_ih)?;
        let bias = g.param(store, self.bias)?;
        let proj = g.matmul(x, w_ih)?;
        let proj = g.add_bias(proj, bias)?;
        let mut state = init;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx = g.slice(proj, 1, t, 1)?;
            let gx = g.reshape(gx, &[batch, 4 * self.hidden])?;
            state = self.step(g, store, gx, state)?;
            outputs.push(g.reshape(state.h, &[batch, 1, self.hidden])?);
        }
        let seq = g.concat(&outputs, 1)?;
        Ok((seq, state))
    }
}

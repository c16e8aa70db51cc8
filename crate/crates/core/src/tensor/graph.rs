use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{shape_err, Result, Scalar, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node of one specific [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Elu(usize),
    Relu(usize),
    Softmax(usize),
    Dropout { x: usize, mask: Vec<T> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: usize, indices: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Expand { x: usize, axis: usize, times: usize },
    SumAll(usize),
    Pinball { pred: usize, target: usize, quantiles: Vec<T> },
    Mse { pred: usize, target: usize },
    Im2col { x: usize, kernel: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Expand { .. } => "expand",
            Op::SumAll(_) => "sum_all",
            Op::Pinball { .. } => "pinball_loss",
            Op::Mse { .. } => "mse_loss",
            Op::Im2col { .. } => "im2col",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Elu(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::Dropout { x, .. }
            | Op::Slice { x, .. }
            | Op::Expand { x, .. }
            | Op::Im2col { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Pinball { pred, target, .. } | Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of primitive applications for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward simply walks it in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints of every node after [`Graph::backward`].
#[derive(Debug)]
pub struct Adjoints<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Adjoints<T> {
    /// Gradient of the loss with respect to `var`, if it was reachable and
    /// required a gradient.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`; parameters the loss does not
    /// reach get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.grads[pid.0] = g.clone();
            }
        }
        out
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFiniteResult { op })
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::DetachedNode);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>) -> Result<Var> {
        check_finite(op, value.data())?;
        let needs_grad = match &kind {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable belongs to graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Leaf that receives a gradient without being a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("variable", value.data())?;
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    /// Brings a stored parameter into the graph. Repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.is_empty() || sb.len() != 2 || last_dim(sa) != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[ia].value.len() / k.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm_raw(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            k as isize,
            1,
            self.nodes[ib].value.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push("matmul", Tensor { shape, data: out }, Op::MatMul(ia, ib))
    }

    /// Batched product `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for bi in 0..batch {
            T::gemm_raw(
                m,
                k,
                n,
                &da[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &db[bi * k * n..(bi + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        self.push(
            "bmm",
            Tensor {
                shape: vec![batch, m, n],
                data: out,
            },
            Op::Bmm {
                a: ia,
                b: ib,
                trans_b,
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn map(&self, a: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = &self.nodes[a].value;
        Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let out = self.zip_map(ia, ib, |x, y| x + y);
        self.push("add", out, Op::Add(ia, ib))
    }

    /// Adds a `[N]` bias to every row of a `[..., N]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        let n = last_dim(sx);
        if sx.is_empty() || sb != [n] {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = self.nodes[ib].value.data();
        let xv = &self.nodes[ix].value;
        let data = xv
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&r, &c)| r + c))
            .collect();
        let out = Tensor {
            shape: sx.to_vec(),
            data,
        };
        self.push("add_bias", out, Op::AddBias(ix, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let out = self.zip_map(ia, ib, |x, y| x * y);
        self.push("mul", out, Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let c = T::from_f64_lossy(factor);
        let out = self.map(ix, |v| v * c);
        self.push("scale", out, Op::Scale(ix, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.map(ix, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(ix))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.map(ix, |v| v.tanh());
        self.push("tanh", out, Op::Tanh(ix))
    }

    /// ELU with unit alpha.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.map(ix, |v| if v >= T::zero() { v } else { v.exp_m1() });
        self.push("elu", out, Op::Elu(ix))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.map(ix, |v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(ix))
    }

    /// Softmax over the last axis.
    ///
    /// `mask`, when given, marks kept entries (`true`) and is tiled over the
    /// tensor; masked entries come out exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let n = last_dim(xv.shape());
        if n == 0 {
            return Err(shape_err("softmax", "empty last axis"));
        }
        if let Some(m) = &mask {
            if m.is_empty() || m.len() % n != 0 || xv.len() % m.len() != 0 {
                return Err(shape_err(
                    "softmax",
                    format!("mask of {} for shape {:?}", m.len(), xv.shape()),
                ));
            }
        }
        let mut data = vec![T::zero(); xv.len()];
        for (r, (row, out)) in xv
            .data()
            .chunks_exact(n)
            .zip(data.chunks_exact_mut(n))
            .enumerate()
        {
            let keep = |j: usize| match &mask {
                Some(m) => m[(r * n + j) % m.len()],
                None => true,
            };
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::InvalidArgument {
                    op: "softmax",
                    detail: format!("row {r} is fully masked"),
                });
            }
            let mut total = T::zero();
            for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (v - max).exp();
                    total = total + *o;
                }
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        self.push("softmax", out, Op::Softmax(ix))
    }

    /// Inverted dropout. Identity (no new node) in eval mode or when `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let ix = self.idx(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.nodes[ix].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = &self.nodes[ix].value;
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        self.push("dropout", out, Op::Dropout { x: ix, mask })
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let sx = self.nodes[ix].value.shape();
        let n = last_dim(sx);
        if sx.is_empty() || self.nodes[ig].value.shape() != [n] || self.nodes[ib].value.shape() != [n]
        {
            return Err(shape_err("layer_norm", format!("{sx:?}")));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nt = T::from_usize(n).unwrap();
        let xv = &self.nodes[ix].value;
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                data[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor {
            shape: sx.to_vec(),
            data,
        };
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows of a `[N, D]` table -> `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let st = self.nodes[it].value.shape();
        if st.len() != 2 {
            return Err(shape_err("embedding", format!("table {st:?}")));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                detail: format!("index {bad} outside table of {rows} rows"),
            });
        }
        let tv = self.nodes[it].value.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor {
            shape: vec![indices.len(), d],
            data,
        };
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table: it,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let chunk = self.nodes[i].value.shape()[axis] * inner;
                data.extend_from_slice(&self.nodes[i].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor { shape, data },
            Op::Concat { inputs: ids, axis },
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            "slice",
            Tensor { shape, data },
            Op::Slice {
                x: ix,
                axis,
                start,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(ix))
    }

    /// Inserts a new axis of size `times` at `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if axis > s.len() {
            return Err(shape_err("expand", format!("axis {axis} for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let src = self.nodes[ix].value.data();
        let mut data = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, times);
        self.push(
            "expand",
            Tensor { shape, data },
            Op::Expand { x: ix, axis, times },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let total = self.nodes[ix].value.data().iter().copied().sum::<T>();
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(ix))
    }

    /// Mean pinball loss; `pred` is `[..., Q]`, `target` is `[...]`.
    pub fn pinball_loss(&mut self, pred: Var, target: Var, quantiles: &[f64]) -> Result<Var> {
        let (ip, it) = (self.idx(pred)?, self.idx(target)?);
        let q = quantiles.len();
        let (sp, st) = (self.nodes[ip].value.shape(), self.nodes[it].value.shape());
        if q == 0 || sp.is_empty() || sp[..sp.len() - 1] != *st || sp[sp.len() - 1] != q {
            return Err(shape_err("pinball_loss", format!("pred {sp:?}, target {st:?}, {q} quantiles")));
        }
        let qs: Vec<T> = quantiles.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let p = self.nodes[ip].value.data();
        let t = self.nodes[it].value.data();
        let mut total = T::zero();
        for (i, &y) in t.iter().enumerate() {
            for (j, &qj) in qs.iter().enumerate() {
                let e = y - p[i * q + j];
                total = total + (qj * e).max((qj - T::one()) * e);
            }
        }
        let loss = total / T::from_usize(p.len()).unwrap();
        self.push(
            "pinball_loss",
            Tensor::scalar(loss),
            Op::Pinball {
                pred: ip,
                target: it,
                quantiles: qs,
            },
        )
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.idx(pred)?, self.idx(target)?);
        self.same_shape("mse_loss", ip, it)?;
        let p = self.nodes[ip].value.data();
        let t = self.nodes[it].value.data();
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = total / T::from_usize(p.len().max(1)).unwrap();
        self.push("mse_loss", Tensor::scalar(loss), Op::Mse { pred: ip, target: it })
    }

    /// Unfolds `[B, T, F]` into `[B, T, kernel·F]` windows with "same" zero
    /// padding: `(kernel-1)/2` steps before, the rest after.
    pub fn im2col_same(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 3 || kernel == 0 {
            return Err(shape_err("im2col", format!("{s:?} kernel {kernel}")));
        }
        let (b, t, f) = (s[0], s[1], s[2]);
        let left = (kernel - 1) / 2;
        let src = self.nodes[ix].value.data();
        let mut data = vec![T::zero(); b * t * kernel * f];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..kernel {
                    let src_t = ti as isize + j as isize - left as isize;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let src_off = (bi * t + src_t as usize) * f;
                    let dst_off = (bi * t + ti) * kernel * f + j * f;
                    data[dst_off..dst_off + f].copy_from_slice(&src[src_off..src_off + f]);
                }
            }
        }
        self.push(
            "im2col",
            Tensor {
                shape: vec![b, t, kernel * f],
                data,
            },
            Op::Im2col { x: ix, kernel },
        )
    }

    /// Text edge list, one `src -> dst op` line per input edge.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs = node.op.inputs();
            match &node.op {
                Op::Param(id) => {
                    let _ = writeln!(out, "{i} param#{} {:?}", id.index(), node.value.shape());
                }
                Op::Leaf => {
                    let _ = writeln!(out, "{i} leaf {:?}", node.value.shape());
                }
                _ => {}
            }
            for src in inputs {
                let _ = writeln!(out, "{src} -> {i} {} {:?}", node.op.name(), node.value.shape());
            }
        }
        out
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Adjoints<T>> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NotScalarLoss(
                self.nodes[il].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), T::one()));
        for i in (0..=il).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut params: Vec<(ParamId, usize)> =
            self.params.iter().map(|(&p, v)| (p, v.index)).collect();
        params.sort();
        Ok(Adjoints {
            graph: self.id,
            grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let dyd = dy.data();
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k.max(1);
                if wants(*a) {
                    let ga = grad_buf(grads, *a, va.shape());
                    T::gemm_raw(m, n, k, dyd, n as isize, 1, vb.data(), 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, vb.shape());
                    T::gemm_raw(k, m, n, va.data(), 1, k as isize, dyd, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                if wants(*a) {
                    let ga = grad_buf(grads, *a, va.shape());
                    for bi in 0..batch {
                        let dyb = &dyd[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb.data()[bi * k * n..(bi + 1) * k * n];
                        let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // dA = dY · Bᵀ (or dY · B when B was already transposed)
                        let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm_raw(m, n, k, dyb, n as isize, 1, bb, rs, cs, T::one(), gab, k as isize, 1);
                    }
                }
                if wants(*b) {
                    let gb = grad_buf(grads, *b, vb.shape());
                    for bi in 0..batch {
                        let dyb = &dyd[bi * m * n..(bi + 1) * m * n];
                        let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[N,K] = dYᵀ · A
                            T::gemm_raw(n, m, k, dyb, 1, n as isize, ab, k as isize, 1, T::one(), gbb, k as isize, 1);
                        } else {
                            // dB[K,N] = Aᵀ · dY
                            T::gemm_raw(k, m, n, ab, 1, k as isize, dyb, n as isize, 1, T::one(), gbb, n as isize, 1);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &j in [a, b].iter() {
                    if wants(*j) {
                        let g = grad_buf(grads, *j, node.value.shape());
                        add_into(g, dyd);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    add_into(grad_buf(grads, *x, node.value.shape()), dyd);
                }
                if wants(*b) {
                    let n = self.nodes[*b].value.len();
                    let gb = grad_buf(grads, *b, &[n]);
                    for row in dyd.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if wants(*a) {
                    let g = grad_buf(grads, *a, node.value.shape());
                    for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(vb) {
                        *g = *g + d * o;
                    }
                }
                if wants(*b) {
                    let g = grad_buf(grads, *b, node.value.shape());
                    for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(va) {
                        *g = *g + d * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                let g = grad_buf(grads, *x, node.value.shape());
                for (g, &d) in g.iter_mut().zip(dyd) {
                    *g = *g + d * *c;
                }
            }
            Op::Sigmoid(x) => {
                let g = grad_buf(grads, *x, node.value.shape());
                for ((g, &d), &s) in g.iter_mut().zip(dyd).zip(y) {
                    *g = *g + d * s * (T::one() - s);
                }
            }
            Op::Tanh(x) => {
                let g = grad_buf(grads, *x, node.value.shape());
                for ((g, &d), &t) in g.iter_mut().zip(dyd).zip(y) {
                    *g = *g + d * (T::one() - t * t);
                }
            }
            Op::Elu(x) => {
                let g = grad_buf(grads, *x, node.value.shape());
                for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(y) {
                    let slope = if o >= T::zero() { T::one() } else { o + T::one() };
                    *g = *g + d * slope;
                }
            }
            Op::Relu(x) => {
                let g = grad_buf(grads, *x, node.value.shape());
                for ((g, &d), &o) in g.iter_mut().zip(dyd).zip(y) {
                    if o > T::zero() {
                        *g = *g + d;
                    }
                }
            }
            Op::Softmax(x) => {
                let n = last_dim(node.value.shape());
                let g = grad_buf(grads, *x, node.value.shape());
                for ((gr, dr), yr) in g
                    .chunks_exact_mut(n)
                    .zip(dyd.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: T = dr.iter().zip(yr).map(|(&d, &s)| d * s).sum();
                    for ((g, &d), &s) in gr.iter_mut().zip(dr).zip(yr) {
                        *g = *g + s * (d - dot);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let g = grad_buf(grads, *x, node.value.shape());
                for ((g, &d), &m) in g.iter_mut().zip(dyd).zip(mask) {
                    *g = *g + d * m;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = last_dim(node.value.shape());
                let nt = T::from_usize(n).unwrap();
                let gv = self.nodes[*gamma].value.data();
                if wants(*gamma) {
                    let gg = grad_buf(grads, *gamma, &[n]);
                    for (dr, hr) in dyd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((g, &d), &h) in gg.iter_mut().zip(dr).zip(hr) {
                            *g = *g + d * h;
                        }
                    }
                }
                if wants(*beta) {
                    let gb = grad_buf(grads, *beta, &[n]);
                    for dr in dyd.chunks_exact(n) {
                        add_into(gb, dr);
                    }
                }
                if wants(*x) {
                    let gx = grad_buf(grads, *x, node.value.shape());
                    for (r, ((gr, dr), hr)) in gx
                        .chunks_exact_mut(n)
                        .zip(dyd.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * hr[j];
                        }
                        let scale = inv_std[r] / nt;
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            gr[j] = gr[j] + scale * (nt * dh - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.nodes[*table].value.shape()[1];
                let g = grad_buf(grads, *table, self.nodes[*table].value.shape());
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut g[i * d..(i + 1) * d], &dyd[r * d..(r + 1) * d]);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &j in inputs {
                    let len = self.nodes[j].value.shape()[*axis];
                    if wants(j) {
                        let g = grad_buf(grads, j, self.nodes[j].value.shape());
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(
                                &mut g[o * len * inner..(o + 1) * len * inner],
                                &dyd[src..src + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.nodes[*x].value.shape();
                let (outer, inner) = outer_inner(sx, *axis);
                let len = node.value.shape()[*axis];
                let full = sx[*axis];
                let g = grad_buf(grads, *x, sx);
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    add_into(
                        &mut g[dst..dst + len * inner],
                        &dyd[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Reshape(x) => {
                add_into(grad_buf(grads, *x, self.nodes[*x].value.shape()), dyd);
            }
            Op::Expand { x, axis, times } => {
                let sx = self.nodes[*x].value.shape();
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[*axis..].iter().product();
                let g = grad_buf(grads, *x, sx);
                for o in 0..outer {
                    for r in 0..*times {
                        let src = (o * times + r) * inner;
                        add_into(&mut g[o * inner..(o + 1) * inner], &dyd[src..src + inner]);
                    }
                }
            }
            Op::SumAll(x) => {
                let d = dyd[0];
                let g = grad_buf(grads, *x, self.nodes[*x].value.shape());
                for v in g.iter_mut() {
                    *v = *v + d;
                }
            }
            Op::Pinball {
                pred,
                target,
                quantiles,
            } => {
                let q = quantiles.len();
                let p = self.nodes[*pred].value.data();
                let t = self.nodes[*target].value.data();
                let scale = dyd[0] / T::from_usize(p.len()).unwrap();
                if wants(*pred) {
                    let g = grad_buf(grads, *pred, self.nodes[*pred].value.shape());
                    for (i, &yv) in t.iter().enumerate() {
                        for (j, &qj) in quantiles.iter().enumerate() {
                            let e = yv - p[i * q + j];
                            let slope = if e > T::zero() { -qj } else { T::one() - qj };
                            g[i * q + j] = g[i * q + j] + scale * slope;
                        }
                    }
                }
                if wants(*target) {
                    let g = grad_buf(grads, *target, self.nodes[*target].value.shape());
                    for (i, &yv) in t.iter().enumerate() {
                        for (j, &qj) in quantiles.iter().enumerate() {
                            let e = yv - p[i * q + j];
                            let slope = if e > T::zero() { qj } else { qj - T::one() };
                            g[i] = g[i] + scale * slope;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = self.nodes[*pred].value.data();
                let t = self.nodes[*target].value.data();
                let two = T::from_f64_lossy(2.0);
                let scale = two * dyd[0] / T::from_usize(p.len().max(1)).unwrap();
                if wants(*pred) {
                    let g = grad_buf(grads, *pred, self.nodes[*pred].value.shape());
                    for ((g, &a), &b) in g.iter_mut().zip(p).zip(t) {
                        *g = *g + scale * (a - b);
                    }
                }
                if wants(*target) {
                    let g = grad_buf(grads, *target, self.nodes[*target].value.shape());
                    for ((g, &a), &b) in g.iter_mut().zip(p).zip(t) {
                        *g = *g - scale * (a - b);
                    }
                }
            }
            Op::Im2col { x, kernel } => {
                let sx = self.nodes[*x].value.shape();
                let (b, t, f) = (sx[0], sx[1], sx[2]);
                let left = (kernel - 1) / 2;
                let g = grad_buf(grads, *x, sx);
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..*kernel {
                            let src_t = ti as isize + j as isize - left as isize;
                            if src_t < 0 || src_t >= t as isize {
                                continue;
                            }
                            let gx = (bi * t + src_t as usize) * f;
                            let dy_off = (bi * t + ti) * kernel * f + j * f;
                            add_into(&mut g[gx..gx + f], &dyd[dy_off..dy_off + f]);
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    i: usize,
    shape: &[usize],
) -> &'a mut [T] {
    grads[i]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

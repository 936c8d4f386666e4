//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order. Because inputs are
//! always created before their consumers, replaying the tape backwards visits
//! each node once after all of its consumers, and gradients of values with
//! several consumers accumulate additively.
//!
//! Trainable tensors live in a [`ParamStore`]; a graph borrows the store and
//! refers to parameters by id without copying them.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ArgusError, Result};
use crate::tensor::{gemm, gemm_view, Float, Tensor, View};

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<F>,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor<F>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), group, value });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention sequence inside a packed `[rows, width]` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: F },
    ScaleBy { a: usize, s: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Gather { a: usize, idx: Vec<usize> },
    Reshape { a: usize },
    Gelu { a: usize },
    Dropout { a: usize, mask: Vec<F> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { a: usize },
    Normalize { a: usize, norms: Vec<F> },
    RowDot { a: usize, b: usize },
    LogSumExp { a: usize, probs: Vec<F> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
    MaskedFill { a: usize, mask: Vec<bool> },
    Softplus { a: usize },
    WeightedSum { a: usize, weights: Vec<F> },
    InvClampedExp { a: usize, active: bool },
    Attention { q: usize, k: usize, v: usize, segments: Vec<Segment>, heads: usize, probs: Vec<F> },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    leaves: HashMap<usize, Tensor<F>>,
    params: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed by [`ParamId`]; `None` for parameters
    /// the graph never touched.
    pub fn into_params(self) -> Vec<Option<Tensor<F>>> {
        self.params
    }
}

const MASK_VALUE: f64 = -1.0e30;

pub struct Graph<'p, F: Float> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    seed: u64,
    dropout_calls: u64,
}

impl<'p, F: Float> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Float> Graph<'p, F> {
    /// A graph without parameters, in eval mode.
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), train: false, seed: 0, dropout_calls: 0 }
    }

    /// A graph without parameters, in train mode with dropout keyed by `seed`.
    pub fn train_mode(seed: u64) -> Self {
        Self { train: true, seed, ..Self::new() }
    }

    pub fn with_params(store: &'p ParamStore<F>, train: bool, seed: u64) -> Self {
        Self { store: Some(store), train, seed, ..Self::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.tensor(v.0)
    }

    fn tensor(&self, i: usize) -> &Tensor<F> {
        match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").value(*id),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that does not require a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn shape_err(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> ArgusError {
        ArgusError::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
    }

    fn require_2d(op: &str, t: &Tensor<F>) -> Result<()> {
        if t.shape().len() != 2 {
            return Err(ArgusError::Shape(format!("{op}: expected a matrix, got {:?}", t.shape())));
        }
        Ok(())
    }

    /// `a·b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        Self::require_2d("matmul", ta)?;
        Self::require_2d("matmul", tb)?;
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = if trans_b { (tb.cols(), tb.rows()) } else { (tb.rows(), tb.cols()) };
        if k != k2 {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(ta.data(), m, k, false, tb.data(), tb.rows(), tb.cols(), trans_b, &mut out, false);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds a `[cols]` (or `[1, cols]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(Self::shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, &r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::AddRow { a: a.0, row: row.0 }, &[a.0, row.0]))
    }

    /// `a @ w + bias`.
    pub fn linear(&mut self, a: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(a, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect()).unwrap();
        self.push(t, Op::Scale { a: a.0, c }, &[a.0])
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(Self::shape_err("scale_by", ta, ts));
        }
        let c = ts.item();
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())?;
        Ok(self.push(t, Op::ScaleBy { a: a.0, s: s.0 }, &[a.0, s.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ArgusError::Shape("concat_cols: no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            Self::require_2d("concat_cols", t)?;
            if t.rows() != rows {
                return Err(Self::shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = vec![F::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let t = Tensor::new(&[rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols { parts: idx.clone() }, &idx))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ArgusError::Shape("concat_rows: no inputs".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Self::shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows { parts: idx.clone() }, &idx))
    }

    /// Row gather; the backward pass scatter-adds into `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(ArgusError::Shape(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], data)?;
        Ok(self.push(t, Op::Gather { a: a.0, idx: idx.to_vec() }, &[a.0]))
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn embedding_gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows(table, idx)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { a: a.0 }, &[a.0]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| gelu(x)).collect()).unwrap();
        self.push(t, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    ///
    /// Each call draws its mask from a fresh stream keyed by the graph seed
    /// and a per-graph call counter.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(self.dropout_calls)));
        self.dropout_calls += 1;
        let keep = F::of(1.0 / (1.0 - p));
        let ta = self.value(a);
        let mask: Vec<F> = (0..ta.len()).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect();
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(ta.shape(), data).unwrap();
        self.push(t, Op::Dropout { a: a.0, mask }, &[a.0])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Self::shape_err("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![F::zero(); rows * c];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * c];
        let n = F::of(c as f64);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd }, &[x.0, gain.0, bias.0]))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape(), out).unwrap();
        self.push(t, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Rows scaled to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        let mut norms = Vec::with_capacity(ta.rows());
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            if n > F::zero() {
                row.iter_mut().for_each(|x| *x /= n);
            }
            norms.push(n);
        }
        let t = Tensor::new(ta.shape(), out).unwrap();
        self.push(t, Op::Normalize { a: a.0, norms }, &[a.0])
    }

    /// Per-row inner product, shape `[rows]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("row_dot", ta, tb));
        }
        let rows = ta.rows();
        let out = (0..rows).map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(&x, &y)| x * y).sum()).collect();
        let t = Tensor::new(&[rows], out)?;
        Ok(self.push(t, Op::RowDot { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Per-row cosine similarity, shape `[rows]`; 0 when either row is zero.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        self.row_dot(na, nb)
    }

    /// Per-row log-sum-exp, shape `[rows]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, c) = (ta.rows(), ta.cols());
        let mut probs = ta.data().to_vec();
        let mut out = Vec::with_capacity(rows);
        for (r, row) in probs.chunks_mut(c.max(1)).enumerate() {
            out.push(log_sum_exp(ta.row(r)));
            softmax_in_place(row);
        }
        let t = Tensor::new(&[rows], out).unwrap();
        self.push(t, Op::LogSumExp { a: a.0, probs }, &[a.0])
    }

    /// Per-row categorical cross-entropy of `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, c) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(ArgusError::Shape(format!("cross_entropy: {rows} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(ArgusError::Feedback(format!("class index {bad} out of range 0..{c}")));
        }
        let mut probs = tl.data().to_vec();
        let mut out = Vec::with_capacity(rows);
        for (r, row) in probs.chunks_mut(c.max(1)).enumerate() {
            let logits_row = tl.row(r);
            out.push(log_sum_exp(logits_row) - logits_row[targets[r]]);
            softmax_in_place(row);
        }
        let t = Tensor::new(&[rows], out)?;
        Ok(self.push(t, Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs }, &[logits.0]))
    }

    /// Replaces masked entries by a large negative constant so they vanish
    /// under a following softmax.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(ArgusError::Shape(format!("mask_fill: {} mask entries for {:?}", mask.len(), ta.shape())));
        }
        let fill = F::of(MASK_VALUE);
        let data = ta.data().iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::MaskedFill { a: a.0, mask: mask.to_vec() }, &[a.0]))
    }

    /// `log(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| softplus(x)).collect()).unwrap();
        self.push(t, Op::Softplus { a: a.0 }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let w = vec![F::one(); self.value(a).len()];
        self.weighted_sum_impl(a, w)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let w = vec![F::of(1.0 / n as f64); self.value(a).len()];
        self.weighted_sum_impl(a, w)
    }

    /// `Σ w_i a_i` as a `[1]` tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(ArgusError::Shape(format!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                self.value(a).shape()
            )));
        }
        Ok(self.weighted_sum_impl(a, weights.iter().map(|&w| F::of(w)).collect()))
    }

    fn weighted_sum_impl(&mut self, a: Var, weights: Vec<F>) -> Var {
        let s: F = self.value(a).data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { a: a.0, weights }, &[a.0])
    }

    /// `1 / clamp(e^a, lo, hi)` for a single-value `a`. The gradient is zero
    /// while the clamp is binding.
    pub fn inv_clamped_exp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != 1 {
            return Err(ArgusError::Shape(format!("inv_clamped_exp: expected one value, got {:?}", ta.shape())));
        }
        let e = ta.item().as_f64().exp();
        let active = e > lo && e < hi;
        let v = 1.0 / e.clamp(lo, hi);
        Ok(self.push(Tensor::scalar(F::of(v)), Op::InvClampedExp { a: a.0, active }, &[a.0]))
    }

    /// Multi-head scaled dot-product attention with a causal mask, applied
    /// independently to every segment of the packed rows. Position `i`
    /// attends to positions `0..=i` of its own segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Self::shape_err("causal_attention", tq, tk));
        }
        Self::require_2d("causal_attention", tq)?;
        let (rows, width) = (tq.rows(), tq.cols());
        if heads == 0 || width % heads != 0 {
            return Err(ArgusError::Shape(format!("width {width} not divisible by {heads} heads")));
        }
        for s in segments {
            if s.start + s.len > rows {
                return Err(ArgusError::Shape(format!("segment {s:?} exceeds {rows} rows")));
            }
        }
        let dh = width / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); rows * width];
        let mut poff = 0;
        for s in segments {
            let t = s.len;
            for h in 0..heads {
                let off = s.start * width + h * dh;
                let qv = View { data: tq.data(), offset: off, row_stride: width, rows: t, cols: dh };
                let kv = View { data: tk.data(), offset: off, row_stride: width, rows: t, cols: dh };
                let p = &mut probs[poff..poff + t * t];
                gemm_view(&qv, false, &kv, true, p, 0, t, false);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for x in row[..=i].iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    for x in row[i + 1..].iter_mut() {
                        *x = F::zero();
                    }
                }
                let pv = View { data: &probs[poff..poff + t * t], offset: 0, row_stride: t, rows: t, cols: t };
                let vv = View { data: tv.data(), offset: off, row_stride: width, rows: t, cols: dh };
                gemm_view(&pv, false, &vv, false, &mut out, off, width, false);
                poff += t * t;
            }
        }
        let t = Tensor::new(&[rows, width], out)?;
        Ok(self.push(
            t,
            Op::Attention { q: q.0, k: k.0, v: v.0, segments: segments.to_vec(), heads, probs },
            &[q.0, k.0, v.0],
        ))
    }

    /// Reverse pass from a single-value output.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        grads[output.0] = Some(vec![F::one()]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        let mut params: Vec<Option<Tensor<F>>> = (0..self.store.map_or(0, |s| s.len())).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let t = Tensor::new(self.tensor(i).shape(), g).unwrap();
            match node.value {
                Value::Param(id) => params[id.0] = Some(t),
                Value::Owned(_) => {
                    leaves.insert(i, t);
                }
            }
        }
        Gradients { leaves, params }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.tensor(*a), self.tensor(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = if *trans_b { tb.rows() } else { tb.cols() };
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    // dA = dC·Bᵀ, or dC·B when B was used transposed
                    gemm(g, m, n, false, tb.data(), tb.rows(), tb.cols(), !*trans_b, &mut da, false);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); tb.len()];
                    if *trans_b {
                        gemm(g, m, n, true, ta.data(), m, k, false, &mut db, false);
                    } else {
                        gemm(ta.data(), m, k, true, g, m, n, false, &mut db, false);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.tensor(*a), self.tensor(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let c = self.tensor(*row).len();
                    let mut dr = vec![F::zero(); c];
                    for chunk in g.chunks(c.max(1)) {
                        for (d, &x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::ScaleBy { a, s } => {
                let (ta, ts) = (self.tensor(*a), self.tensor(*s));
                if self.wants(*a) {
                    let c = ts.item();
                    accumulate(grads, *a, g.iter().map(|&x| x * c).collect());
                }
                if self.wants(*s) {
                    let ds: F = g.iter().zip(ta.data()).map(|(&d, &x)| d * x).sum();
                    accumulate(grads, *s, vec![ds]);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.tensor(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.tensor(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.tensor(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.tensor(p).len();
                    if self.wants(p) {
                        accumulate(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::Gather { a, idx } if self.wants(*a) => {
                let ta = self.tensor(*a);
                let c = ta.cols();
                let slot = grads[*a].get_or_insert_with(|| vec![F::zero(); ta.len()]);
                for (r, &src) in idx.iter().enumerate() {
                    for (d, &x) in slot[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += x;
                    }
                }
            }
            Op::Gather { .. } => {}
            Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::Gelu { a } => {
                let ta = self.tensor(*a);
                accumulate(grads, *a, g.iter().zip(ta.data()).map(|(&d, &x)| d * gelu_grad(x)).collect());
            }
            Op::Dropout { a, mask } => {
                accumulate(grads, *a, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.tensor(*gain);
                let c = tg.len();
                let rows = rstd.len();
                if self.wants(*gain) {
                    let mut dg = vec![F::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![F::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
                if self.wants(*x) {
                    let n = F::of(c as f64);
                    let mut dx = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            let dh = g[r * c + j] * tg.data()[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * c + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let dh = g[r * c + j] * tg.data()[j];
                            dx[r * c + j] = rstd[r] * (dh - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { a } => {
                let y = self.tensor(i);
                let c = y.cols();
                let mut dx = vec![F::zero(); y.len()];
                for (r, out) in dx.chunks_mut(c.max(1)).enumerate() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Normalize { a, norms } => {
                let y = self.tensor(i);
                let c = y.cols();
                let mut dx = vec![F::zero(); y.len()];
                for (r, out) in dx.chunks_mut(c.max(1)).enumerate() {
                    let n = norms[r];
                    if n <= F::zero() {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for j in 0..c {
                        out[j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::RowDot { a, b } => {
                let (ta, tb) = (self.tensor(*a), self.tensor(*b));
                let c = ta.cols();
                let spread = |other: &Tensor<F>| -> Vec<F> {
                    let mut d = vec![F::zero(); other.len()];
                    for (r, out) in d.chunks_mut(c.max(1)).enumerate() {
                        for (o, &x) in out.iter_mut().zip(other.row(r)) {
                            *o = g[r] * x;
                        }
                    }
                    d
                };
                if self.wants(*a) {
                    accumulate(grads, *a, spread(tb));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, spread(ta));
                }
            }
            Op::LogSumExp { a, probs } => {
                let c = self.tensor(*a).cols();
                let d = probs.iter().enumerate().map(|(j, &p)| p * g[j / c]).collect();
                accumulate(grads, *a, d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.tensor(*logits).cols();
                let mut d: Vec<F> = probs.iter().enumerate().map(|(j, &p)| p * g[j / c]).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= g[r];
                }
                accumulate(grads, *logits, d);
            }
            Op::MaskedFill { a, mask } => {
                let d = g.iter().zip(mask).map(|(&x, &m)| if m { F::zero() } else { x }).collect();
                accumulate(grads, *a, d);
            }
            Op::Softplus { a } => {
                let ta = self.tensor(*a);
                accumulate(grads, *a, g.iter().zip(ta.data()).map(|(&d, &x)| d * sigmoid(x)).collect());
            }
            Op::WeightedSum { a, weights } => {
                accumulate(grads, *a, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::InvClampedExp { a, active } => {
                let d = if *active { -self.tensor(i).item() * g[0] } else { F::zero() };
                accumulate(grads, *a, vec![d]);
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, segments, *heads, probs, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        q: usize,
        k: usize,
        v: usize,
        segments: &[Segment],
        heads: usize,
        probs: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (tq, tk, tv) = (self.tensor(q), self.tensor(k), self.tensor(v));
        let width = tq.cols();
        let dh = width / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let n = tq.len();
        let mut dq = vec![F::zero(); n];
        let mut dk = vec![F::zero(); n];
        let mut dv = vec![F::zero(); n];
        let mut poff = 0;
        let mut dp = Vec::new();
        for s in segments {
            let t = s.len;
            dp.resize(t * t, F::zero());
            for h in 0..heads {
                let off = s.start * width + h * dh;
                let p = &probs[poff..poff + t * t];
                let pview = View { data: p, offset: 0, row_stride: t, rows: t, cols: t };
                let gview = View { data: g, offset: off, row_stride: width, rows: t, cols: dh };
                let vview = View { data: tv.data(), offset: off, row_stride: width, rows: t, cols: dh };
                // dV = Pᵀ·dO
                gemm_view(&pview, true, &gview, false, &mut dv, off, width, false);
                // dP = dO·Vᵀ
                gemm_view(&gview, false, &vview, true, &mut dp, 0, t, false);
                for r in 0..t {
                    let prow = &p[r * t..(r + 1) * t];
                    let drow = &mut dp[r * t..(r + 1) * t];
                    let dot: F = prow[..=r].iter().zip(&drow[..=r]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=r {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                    for x in drow[r + 1..].iter_mut() {
                        *x = F::zero();
                    }
                }
                let dsview = View { data: &dp, offset: 0, row_stride: t, rows: t, cols: t };
                let qview = View { data: tq.data(), offset: off, row_stride: width, rows: t, cols: dh };
                let kview = View { data: tk.data(), offset: off, row_stride: width, rows: t, cols: dh };
                // dQ = dS·K, dK = dSᵀ·Q
                gemm_view(&dsview, false, &kview, false, &mut dq, off, width, false);
                gemm_view(&dsview, true, &qview, false, &mut dk, off, width, false);
                poff += t * t;
            }
        }
        if self.wants(q) {
            accumulate(grads, q, dq);
        }
        if self.wants(k) {
            accumulate(grads, k, dk);
        }
        if self.wants(v) {
            accumulate(grads, v, dv);
        }
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], i: usize, d: Vec<F>) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let u = c * (x + F::of(0.044715) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let x2 = x * x;
    let u = c * (x + F::of(0.044715) * x2 * x);
    let th = u.tanh();
    let du = c * (F::one() + F::of(3.0 * 0.044715) * x2);
    half * (F::one() + th) + half * x * (F::one() - th * th) * du
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Float>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

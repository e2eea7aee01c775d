//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation of a
//! forward pass. [`Graph::backward`] walks the tape in reverse and returns
//! per-node gradients, which [`NodeGrads::accumulate_params`] folds into a
//! [`Grads`] buffer aligned with the store.
//!
//! Every op carries a hand-written backward rule. The fused ops
//! (`relational_attention`, `self_attention`, `cross_entropy`,
//! `pair_distances`) exist because composing them from primitives would
//! blow up the tape for `|V|^2`-sized intermediates.

use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Paths follow `module.block.layer.{weight|bias}`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate path.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter path {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint storage type.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

/// Handle of a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Softplus(Var),
    Log(Var),
    Square(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    RelAttention { q: Var, k: Var, v: Var, n: usize, heads: usize, alpha: Vec<f64> },
    SelfAttention { q: Var, k: Var, v: Var, heads: usize, alpha: Vec<f64> },
    CrossEntropy { logits: Var, targets: Rc<[usize]>, weights: Rc<[f64]>, probs: Tensor },
    PairDistances { x: Var, pairs: Rc<[(usize, usize)]> },
    WeightedSum { a: Var, weights: Rc<[f64]> },
    Sum(Var),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Recorded forward computation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params_trainable: bool,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params_trainable: true,
            param_nodes: HashMap::new(),
        }
    }

    /// A graph whose parameters are treated as constants.
    pub fn frozen(store: &'p ParamStore) -> Self {
        Self {
            params_trainable: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, true)
    }

    /// Leaf referencing a stored parameter. Repeated calls share a node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: self.params_trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear: input width {} vs weight rows {}", xv.cols(), wv.rows());
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols()), "linear: bias shape");
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.data());
            }
            gemm(false, xv, false, wv, 1.0, &mut out);
        } else {
            gemm(false, xv, false, wv, 0.0, &mut out);
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Linear { x, w, b }, out, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "add_row: row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), out, ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row: row shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::MulRow(a, row), out, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), out, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.needs(a);
        self.push(Op::Silu(a), out, ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(Op::Softplus(a), out, ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(Op::Log(a), out, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(Op::Square(a), out, ng)
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layernorm(&mut self, x: Var) -> Var {
        let (out, rstd) = layernorm_forward(self.value(x));
        let ng = self.needs(x);
        self.push(Op::LayerNorm { x, rstd }, out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start), out, ng)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Tensor::from_vec(end - start, c, av.data()[start * c..end * c].to_vec());
        let ng = self.needs(a);
        self.push(Op::SliceRows(a, start), out, ng)
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let out = self.value(a).gather_rows(&index);
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, index), out, ng)
    }

    /// Attention over per-pair queries, keys and values.
    ///
    /// `q`, `k`, `v` are `n^2 x d` with row `i * n + j` holding the pair
    /// `(i, j)`. For each head, `alpha_ij = softmax_j(q_ij . k_ij / sqrt(d_h))`
    /// and row `i` of the `n x d` output is `sum_j alpha_ij v_ij`.
    pub fn relational_attention(&mut self, q: Var, k: Var, v: Var, n: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(qv.rows(), n * n, "relational_attention: q rows");
        assert_eq!(kv.shape(), qv.shape(), "relational_attention: k shape");
        assert_eq!(vv.shape(), qv.shape(), "relational_attention: v shape");
        assert!(heads >= 1 && d % heads == 0, "head count must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // alpha laid out [h][i][j]
        let mut alpha = vec![0.0; heads * n * n];
        let mut out = Tensor::zeros(n, d);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let a = &mut alpha[(h * n + i) * n..(h * n + i + 1) * n];
                for (j, aj) in a.iter_mut().enumerate() {
                    let r = i * n + j;
                    *aj = dot(&qv.row(r)[cols.clone()], &kv.row(r)[cols.clone()]) * scale;
                }
                softmax_in_place(a);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (j, &aj) in a.iter().enumerate() {
                    let vr = &vv.row(i * n + j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vr) {
                        *o += aj * x;
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::RelAttention { q, k, v, n, heads, alpha }, out, ng)
    }

    /// Multi-head scaled dot-product self-attention over `n x d` inputs.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d), "self_attention: k shape");
        assert_eq!(vv.shape(), (n, d), "self_attention: v shape");
        assert!(heads >= 1 && d % heads == 0, "head count must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut alpha = vec![0.0; heads * n * n];
        let mut out = Tensor::zeros(n, d);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let a = &mut alpha[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &qv.row(i)[cols.clone()];
                for (j, aj) in a.iter_mut().enumerate() {
                    *aj = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(a);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (j, &aj) in a.iter().enumerate() {
                    for (o, x) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += aj * x;
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(Op::SelfAttention { q, k, v, heads, alpha }, out, ng)
    }

    /// `sum_r weights[r] * CE(softmax(logits_r), targets[r])` as a 1x1 tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>, weights: Rc<[f64]>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "cross_entropy: target count");
        assert_eq!(weights.len(), lv.rows(), "cross_entropy: weight count");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let t = targets[r];
            assert!(t < lv.cols(), "cross_entropy: target class out of range");
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            total += weights[r] * (lse - row[t]);
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let ng = self.needs(logits);
        self.push(
            Op::CrossEntropy { logits, targets, weights, probs },
            Tensor::scalar(total),
            ng,
        )
    }

    /// Euclidean distances between row pairs of `x`, as a `P x 1` column.
    pub fn pair_distances(&mut self, x: Var, pairs: Rc<[(usize, usize)]>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(pairs.len(), 1);
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let s: f64 = xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.set(p, 0, s.sqrt());
        }
        let ng = self.needs(x);
        self.push(Op::PairDistances { x, pairs }, out, ng)
    }

    /// `sum(weights * a)` over all entries, as a 1x1 tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: Rc<[f64]>) -> Var {
        let av = self.value(a);
        assert_eq!(weights.len(), av.len(), "weighted_sum: weight count");
        let s = av.data().iter().zip(weights.iter()).map(|(x, w)| x * w).sum();
        let ng = self.needs(a);
        self.push(Op::WeightedSum { a, weights }, Tensor::scalar(s), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> NodeGrads {
        let ov = self.value(out);
        assert_eq!(ov.shape(), (1, 1), "backward from non-scalar output");
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> NodeGrads {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        assert_eq!(seed.shape(), self.value(out).shape(), "seed shape");
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(seed);
        }
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        NodeGrads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(false, g, true, wv, 0.0, &mut dx);
                    accum(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(true, xv, false, g, 0.0, &mut dw);
                    accum(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accum(grads, *b, col_sum(g));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(false, g, true, bv, 0.0, &mut da);
                    accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(true, av, false, g, 0.0, &mut db);
                    accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    accum(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*row) {
                    accum(grads, *row, col_sum(g));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (d, s) in da.row_mut(r).iter_mut().zip(rv.data()) {
                            *d *= s;
                        }
                    }
                    accum(grads, *a, da);
                }
                if self.needs(*row) {
                    let mut dr = Tensor::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for ((d, gg), x) in dr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *d += gg * x;
                        }
                    }
                    accum(grads, *row, dr);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    accum(grads, *a, g.map(|v| v * s));
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * silu_grad(x)));
                }
            }
            Op::Softplus(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * sigmoid(x)));
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(self.value(*a), |gg, x| gg / x));
                }
            }
            Op::Square(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(self.value(*a), |gg, x| 2.0 * gg * x));
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.needs(*x) {
                    let yv = y.expect("layernorm value");
                    accum(grads, *x, layernorm_backward(yv, rstd, g));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        accum(grads, p, dp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accum(grads, *a, da);
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    let c = av.cols();
                    da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accum(grads, *a, da);
                }
            }
            Op::GatherRows(a, index) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for (r, &src) in index.iter().enumerate() {
                        for (d, gg) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                    accum(grads, *a, da);
                }
            }
            Op::RelAttention { q, k, v, n, heads, alpha } => {
                let n = *n;
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n * n, d);
                let mut dk = Tensor::zeros(n * n, d);
                let mut dv = Tensor::zeros(n * n, d);
                let mut dalpha = vec![0.0; n];
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let a = &alpha[(h * n + i) * n..(h * n + i + 1) * n];
                        let gi = &g.row(i)[cols.clone()];
                        for j in 0..n {
                            let r = i * n + j;
                            dalpha[j] = dot(gi, &vv.row(r)[cols.clone()]);
                            for (dd, gg) in dv.row_mut(r)[cols.clone()].iter_mut().zip(gi) {
                                *dd += a[j] * gg;
                            }
                        }
                        let inner: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            let ds = a[j] * (dalpha[j] - inner) * scale;
                            let r = i * n + j;
                            for c in cols.clone() {
                                dq.data_mut()[r * d + c] += ds * kv.get(r, c);
                                dk.data_mut()[r * d + c] += ds * qv.get(r, c);
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    accum(grads, *q, dq);
                }
                if self.needs(*k) {
                    accum(grads, *k, dk);
                }
                if self.needs(*v) {
                    accum(grads, *v, dv);
                }
            }
            Op::SelfAttention { q, k, v, heads, alpha } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(n, d);
                let mut dv = Tensor::zeros(n, d);
                let mut dalpha = vec![0.0; n];
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..n {
                        let a = &alpha[(h * n + i) * n..(h * n + i + 1) * n];
                        let gi = &g.row(i)[cols.clone()];
                        for j in 0..n {
                            dalpha[j] = dot(gi, &vv.row(j)[cols.clone()]);
                            for (dd, gg) in dv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                *dd += a[j] * gg;
                            }
                        }
                        let inner: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            let ds = a[j] * (dalpha[j] - inner) * scale;
                            for c in cols.clone() {
                                dq.data_mut()[i * d + c] += ds * kv.get(j, c);
                                dk.data_mut()[j * d + c] += ds * qv.get(i, c);
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    accum(grads, *q, dq);
                }
                if self.needs(*k) {
                    accum(grads, *k, dk);
                }
                if self.needs(*v) {
                    accum(grads, *v, dv);
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                if self.needs(*logits) {
                    let s = g.item();
                    let mut dl = probs.clone();
                    for r in 0..dl.rows() {
                        let w = weights[r] * s;
                        let row = dl.row_mut(r);
                        row[targets[r]] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= w;
                        }
                    }
                    accum(grads, *logits, dl);
                }
            }
            Op::PairDistances { x, pairs } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let yv = y.expect("pair distance value");
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let dist = yv.get(p, 0);
                        if dist == 0.0 {
                            continue;
                        }
                        let coef = g.get(p, 0) / dist;
                        for c in 0..xv.cols() {
                            let diff = xv.get(i, c) - xv.get(j, c);
                            dx.data_mut()[i * xv.cols() + c] += coef * diff;
                            dx.data_mut()[j * xv.cols() + c] -= coef * diff;
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::WeightedSum { a, weights } => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    let s = g.item();
                    let data = weights.iter().map(|w| w * s).collect();
                    accum(grads, *a, Tensor::from_vec(av.rows(), av.cols(), data));
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let av = self.value(*a);
                    accum(grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()));
                }
            }
        }
    }
}

/// Gradients of every node reached by a backward pass.
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf of `graph` into `out`.
    pub fn accumulate_params(&self, graph: &Graph<'_>, out: &mut Grads) {
        for (&id, &v) in &graph.param_nodes {
            if let Some(g) = self.get(v) {
                out.grads[id.0].add_assign(g);
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn layernorm_forward(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (out, rstd)
}

fn layernorm_backward(y: &Tensor, rstd: &[f64], g: &Tensor) -> Tensor {
    let (rows, cols) = y.shape();
    let mut dx = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let (yr, gr) = (y.row(r), g.row(r));
        let mean_g = gr.iter().sum::<f64>() / cols as f64;
        let mean_gy = dot(gr, yr) / cols as f64;
        for ((d, gg), yy) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
            *d = rstd[r] * (gg - mean_g - yy * mean_gy);
        }
    }
    dx
}

//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every parameter that
//! took part. Parameters are borrowed from a [`ParamStore`] rather than copied.
//! Besides the elementwise and linear-algebra primitives the tape has fused
//! operations for an LSTM cell, masked cross-attention, order-invariant
//! segment means and the training losses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_nt_acc, matmul_tn_acc, sigmoid, softmax, Matrix};

/// Clamp used for every logarithm and ratio inside the losses.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One segment of a softmax/KL/NLL over rows of a column vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Rows(Vec<Var>, Vec<(usize, usize)>),
    Select(Vec<bool>, Var, Var),
    ScaleRows(Var, Var),
    LstmCell { pre: Var, state: Var },
    Attention(AttentionCache),
    SegmentMean(Var, Vec<Segment>),
    Bce { probs: Var, labels: Vec<f64>, weights: Vec<f64> },
    SpanNll { scores: Var, segments: Vec<Segment>, targets: Vec<usize>, weights: Vec<f64> },
    SpanKl { a: Var, b: Var, pairs: Vec<(usize, usize, usize)>, weights: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct AttentionCache {
    query: Var,
    keys: Var,
    /// Per query row: first key row and number of keys attended.
    ranges: Vec<(usize, usize)>,
    /// Attention weights, `ranges[r].1` entries for row `r`, concatenated.
    weights: Vec<f64>,
    offsets: Vec<usize>,
    scale: f64,
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

/// Gradients of one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }

    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!((1, xv.cols), bv.shape(), "bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(k);
        self.push(out, Op::Scale(x, k))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Matrix::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, libm::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows, rows, "concat row mismatch");
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice out of range");
        let mut out = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `parts[index[r].0]`.
    pub fn rows(&mut self, parts: &[Var], index: Vec<(usize, usize)>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut out = Matrix::zeros(index.len(), cols);
        for (r, &(p, i)) in index.iter().enumerate() {
            let pv = self.value(parts[p]);
            assert_eq!(pv.cols, cols, "rows: column mismatch");
            out.row_mut(r).copy_from_slice(pv.row(i));
        }
        self.push(out, Op::Rows(parts.to_vec(), index))
    }

    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Var {
        self.rows(&[x], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Row `r` comes from `a` where `take_a[r]`, else from `b`.
    pub fn select(&mut self, take_a: Vec<bool>, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "select shape");
        assert_eq!(take_a.len(), av.rows, "select mask length");
        let mut out = bv.clone();
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                out.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        self.push(out, Op::Select(take_a, a, b))
    }

    /// Multiplies row `r` of `x` by the scalar `col[r, 0]`.
    pub fn scale_rows(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!((xv.rows, 1), cv.shape(), "scale_rows shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let k = cv.data[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::ScaleRows(x, col))
    }

    /// LSTM cell. `pre` holds gate pre-activations `[i | f | g | o]` (B x 4h),
    /// `state` is `[h | c]` (B x 2h); returns the new `[h | c]`.
    pub fn lstm_cell(&mut self, pre: Var, state: Var) -> Var {
        let (pv, sv) = (self.value(pre), self.value(state));
        let h = sv.cols / 2;
        assert_eq!(pv.cols, 4 * h, "lstm gate width");
        assert_eq!(pv.rows, sv.rows, "lstm batch");
        let mut out = Matrix::zeros(sv.rows, 2 * h);
        for r in 0..sv.rows {
            let p = pv.row(r);
            let c_prev = &sv.row(r)[h..];
            let o_row = out.row_mut(r);
            for j in 0..h {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[h + j]);
                let g = libm::tanh(p[2 * h + j]);
                let o = sigmoid(p[3 * h + j]);
                let c = f * c_prev[j] + i * g;
                o_row[j] = o * libm::tanh(c);
                o_row[h + j] = c;
            }
        }
        self.push(out, Op::LstmCell { pre, state })
    }

    /// Scaled dot-product attention of each query row over a contiguous range
    /// of key rows; keys double as values. `ranges[r] = (first_key, count)`.
    pub fn attention(&mut self, query: Var, keys: Var, ranges: Vec<(usize, usize)>) -> Var {
        let (qv, kv) = (self.value(query), self.value(keys));
        assert_eq!(qv.cols, kv.cols, "attention width");
        assert_eq!(ranges.len(), qv.rows, "attention ranges");
        let d = qv.cols;
        let scale = 1.0 / libm::sqrt(d as f64);
        let mut out = Matrix::zeros(qv.rows, d);
        let mut weights = Vec::new();
        let mut offsets = Vec::with_capacity(ranges.len());
        for (r, &(first, count)) in ranges.iter().enumerate() {
            assert!(count > 0, "attention over zero keys");
            offsets.push(weights.len());
            let q = qv.row(r);
            let scores: Vec<f64> = (first..first + count)
                .map(|k| q.iter().zip(kv.row(k)).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let a = softmax(&scores);
            let o = out.row_mut(r);
            for (j, &w) in a.iter().enumerate() {
                for (ov, kvv) in o.iter_mut().zip(kv.row(first + j)) {
                    *ov += w * kvv;
                }
            }
            weights.extend_from_slice(&a);
        }
        self.push(
            out,
            Op::Attention(AttentionCache {
                query,
                keys,
                ranges,
                weights,
                offsets,
                scale,
            }),
        )
    }

    /// Mean of each row segment; empty segments give a zero row. Each column is
    /// summed in sorted order so the result does not depend on row order.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Segment>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(segments.len(), xv.cols);
        let mut buf = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            if seg.len == 0 {
                continue;
            }
            for c in 0..xv.cols {
                buf.clear();
                buf.extend((seg.start..seg.start + seg.len).map(|r| xv.get(r, c)));
                buf.sort_by(f64::total_cmp);
                out.set(s, c, buf.iter().sum::<f64>() / seg.len as f64);
            }
        }
        self.push(out, Op::SegmentMean(x, segments))
    }

    /// `sum_r weights[r] * BCE(probs[r], labels[r])` with clamped logs.
    pub fn bce(&mut self, probs: Var, labels: Vec<f64>, weights: Vec<f64>) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.cols, 1);
        assert_eq!(labels.len(), pv.rows);
        assert_eq!(weights.len(), pv.rows);
        let total: f64 = (0..pv.rows)
            .filter(|&r| weights[r] != 0.0)
            .map(|r| weights[r] * bce_term(pv.data[r], labels[r]))
            .sum();
        self.push(Matrix::scalar(total), Op::Bce { probs, labels, weights })
    }

    /// `sum_b weights[b] * -log softmax(scores[segment_b])[target_b]`; targets are
    /// absolute row indices.
    pub fn span_nll(
        &mut self,
        scores: Var,
        segments: Vec<Segment>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Var {
        let sv = self.value(scores);
        let mut total = 0.0;
        for ((seg, &t), &w) in segments.iter().zip(&targets).zip(&weights) {
            assert!(t >= seg.start && t < seg.start + seg.len, "target outside segment");
            let p = softmax(&sv.data[seg.start..seg.start + seg.len]);
            total += w * -libm::log(p[t - seg.start].max(LOG_EPS));
        }
        self.push(
            Matrix::scalar(total),
            Op::SpanNll {
                scores,
                segments,
                targets,
                weights,
            },
        )
    }

    /// `sum weights[i] * KL(softmax(a[s_a..s_a+len]) || softmax(b[s_b..s_b+len]))`
    /// for each `(s_a, s_b, len)` pair.
    pub fn span_kl(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize, usize)>, weights: Vec<f64>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let total: f64 = pairs
            .iter()
            .zip(&weights)
            .map(|(&(sa, sb, len), w)| w * kl_of_logits(&av.data[sa..sa + len], &bv.data[sb..sb + len]))
            .sum();
        self.push(Matrix::scalar(total), Op::SpanKl { a, b, pairs, weights })
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[labels[r]]`
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let total: f64 = (0..lv.rows)
            .map(|r| {
                let p = softmax(lv.row(r));
                weights[r] * -libm::log(p[labels[r]].max(LOG_EPS))
            })
            .sum();
        self.push(Matrix::scalar(total), Op::CrossEntropy { logits, labels, weights })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            let vv = self.value(v);
            assert_eq!(vv.shape(), (1, 1), "weighted_sum expects scalars");
            total += w * vv.data[0];
        }
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Value::Param(id) = node.value {
                params[id.0] = grads[i].clone();
            }
        }
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                matmul_nt_acc(g, bv, grad_slot(grads, a, av.shape()));
                matmul_tn_acc(av, g, grad_slot(grads, b, bv.shape()));
            }
            &Op::AddBias(x, bias) => {
                grad_slot(grads, x, g.shape()).add_assign(g);
                let gb = grad_slot(grads, bias, (1, g.cols));
                for r in 0..g.rows {
                    for (a, b) in gb.data.iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
            }
            &Op::Add(a, b) => {
                grad_slot(grads, a, g.shape()).add_assign(g);
                grad_slot(grads, b, g.shape()).add_assign(g);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let ga = grad_slot(grads, a, g.shape());
                for ((x, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                    *x += gv * y;
                }
                let gb = grad_slot(grads, b, g.shape());
                for ((x, gv), y) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *x += gv * y;
                }
            }
            &Op::Scale(x, k) => {
                let gx = grad_slot(grads, x, g.shape());
                for (a, b) in gx.data.iter_mut().zip(&g.data) {
                    *a += k * b;
                }
            }
            &Op::Sigmoid(x) => {
                let gx = grad_slot(grads, x, g.shape());
                for ((a, gv), y) in gx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *a += gv * y * (1.0 - y);
                }
            }
            &Op::Tanh(x) => {
                let gx = grad_slot(grads, x, g.shape());
                for ((a, gv), y) in gx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *a += gv * (1.0 - y * y);
                }
            }
            &Op::Relu(x) => {
                let gx = grad_slot(grads, x, g.shape());
                for ((a, gv), y) in gx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    if *y > 0.0 {
                        *a += gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let gp = grad_slot(grads, p, shape);
                    for r in 0..g.rows {
                        for (a, b) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1]) {
                            *a += b;
                        }
                    }
                    off += shape.1;
                }
            }
            &Op::SliceCols(x, start) => {
                let shape = self.shape(x);
                let gx = grad_slot(grads, x, shape);
                for r in 0..g.rows {
                    for (a, b) in gx.row_mut(r)[start..start + g.cols].iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::Rows(parts, index) => {
                for (r, &(p, src)) in index.iter().enumerate() {
                    let shape = self.shape(parts[p]);
                    let gp = grad_slot(grads, parts[p], shape);
                    for (a, b) in gp.row_mut(src).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::Select(take_a, a, b) => {
                let shape = g.shape();
                for (r, &t) in take_a.iter().enumerate() {
                    let target = if t { *a } else { *b };
                    let gt = grad_slot(grads, target, shape);
                    for (x, y) in gt.row_mut(r).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            &Op::ScaleRows(x, col) => {
                let (xv, cv) = (self.value(x), self.value(col));
                let gx = grad_slot(grads, x, xv.shape());
                for r in 0..g.rows {
                    let k = cv.data[r];
                    for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                        *a += k * b;
                    }
                }
                let gc = grad_slot(grads, col, cv.shape());
                for r in 0..g.rows {
                    gc.data[r] += g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            &Op::LstmCell { pre, state } => {
                let (pv, sv) = (self.value(pre), self.value(state));
                let h = sv.cols / 2;
                let mut gpre = Matrix::zeros(pv.rows, pv.cols);
                let mut gc_prev = Matrix::zeros(sv.rows, h);
                for r in 0..sv.rows {
                    let p = pv.row(r);
                    let c_prev = &sv.row(r)[h..];
                    let c_new = &out.row(r)[h..];
                    let (gh, gc) = g.row(r).split_at(h);
                    let gp = gpre.row_mut(r);
                    for j in 0..h {
                        let i = sigmoid(p[j]);
                        let f = sigmoid(p[h + j]);
                        let gg = libm::tanh(p[2 * h + j]);
                        let o = sigmoid(p[3 * h + j]);
                        let tc = libm::tanh(c_new[j]);
                        let dc = gc[j] + gh[j] * o * (1.0 - tc * tc);
                        gp[j] = dc * gg * i * (1.0 - i);
                        gp[h + j] = dc * c_prev[j] * f * (1.0 - f);
                        gp[2 * h + j] = dc * i * (1.0 - gg * gg);
                        gp[3 * h + j] = gh[j] * tc * o * (1.0 - o);
                        gc_prev.data[r * h + j] = dc * f;
                    }
                }
                grad_slot(grads, pre, pv.shape()).add_assign(&gpre);
                let gs = grad_slot(grads, state, sv.shape());
                for r in 0..sv.rows {
                    for (a, b) in gs.row_mut(r)[h..].iter_mut().zip(gc_prev.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::Attention(cache) => {
                let (qv, kv) = (self.value(cache.query), self.value(cache.keys));
                let mut gq = Matrix::zeros(qv.rows, qv.cols);
                let mut gk = Matrix::zeros(kv.rows, kv.cols);
                let mut ga = Vec::new();
                for (r, &(first, count)) in cache.ranges.iter().enumerate() {
                    let w = &cache.weights[cache.offsets[r]..cache.offsets[r] + count];
                    let go = g.row(r);
                    ga.clear();
                    ga.extend((0..count).map(|j| go.iter().zip(kv.row(first + j)).map(|(a, b)| a * b).sum::<f64>()));
                    let mean: f64 = w.iter().zip(&ga).map(|(a, b)| a * b).sum();
                    for j in 0..count {
                        let ds = w[j] * (ga[j] - mean) * cache.scale;
                        let krow = first + j;
                        for (c, &g) in go.iter().enumerate() {
                            gq.data[r * qv.cols + c] += ds * kv.get(krow, c);
                            gk.data[krow * kv.cols + c] += ds * qv.get(r, c) + w[j] * g;
                        }
                    }
                }
                grad_slot(grads, cache.query, qv.shape()).add_assign(&gq);
                grad_slot(grads, cache.keys, kv.shape()).add_assign(&gk);
            }
            Op::SegmentMean(x, segments) => {
                let shape = self.shape(*x);
                let gx = grad_slot(grads, *x, shape);
                for (s, seg) in segments.iter().enumerate() {
                    if seg.len == 0 {
                        continue;
                    }
                    let k = 1.0 / seg.len as f64;
                    for r in seg.start..seg.start + seg.len {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *a += k * b;
                        }
                    }
                }
            }
            Op::Bce { probs, labels, weights } => {
                let pv = self.value(*probs);
                let gp = grad_slot(grads, *probs, pv.shape());
                for r in 0..pv.rows {
                    if weights[r] != 0.0 {
                        gp.data[r] += g.data[0] * weights[r] * bce_grad(pv.data[r], labels[r]);
                    }
                }
            }
            Op::SpanNll {
                scores,
                segments,
                targets,
                weights,
            } => {
                let sv = self.value(*scores);
                let gs = grad_slot(grads, *scores, sv.shape());
                for ((seg, &t), &w) in segments.iter().zip(targets).zip(weights) {
                    let p = softmax(&sv.data[seg.start..seg.start + seg.len]);
                    if p[t - seg.start] < LOG_EPS {
                        continue;
                    }
                    for (j, pj) in p.iter().enumerate() {
                        let onehot = if seg.start + j == t { 1.0 } else { 0.0 };
                        gs.data[seg.start + j] += g.data[0] * w * (pj - onehot);
                    }
                }
            }
            Op::SpanKl { a, b, pairs, weights } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows, av.cols);
                let mut gb = Matrix::zeros(bv.rows, bv.cols);
                for (&(sa, sb, len), &w) in pairs.iter().zip(weights) {
                    let (da, db) = kl_logit_grads(&av.data[sa..sa + len], &bv.data[sb..sb + len]);
                    for j in 0..len {
                        ga.data[sa + j] += g.data[0] * w * da[j];
                        gb.data[sb + j] += g.data[0] * w * db[j];
                    }
                }
                grad_slot(grads, *a, av.shape()).add_assign(&ga);
                grad_slot(grads, *b, bv.shape()).add_assign(&gb);
            }
            Op::CrossEntropy { logits, labels, weights } => {
                let lv = self.value(*logits);
                let gl = grad_slot(grads, *logits, lv.shape());
                for r in 0..lv.rows {
                    let p = softmax(lv.row(r));
                    if p[labels[r]] < LOG_EPS {
                        continue;
                    }
                    for (c, pc) in p.iter().enumerate() {
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        gl.data[r * lv.cols + c] += g.data[0] * weights[r] * (pc - onehot);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    grad_slot(grads, v, (1, 1)).data[0] += g.data[0] * w;
                }
            }
        }
    }
}

/// `-[p ln c + (1 - p) ln (1 - c)]` with both logs clamped at [`LOG_EPS`].
pub fn bce_term(c: f64, p: f64) -> f64 {
    -(p * libm::log(c.max(LOG_EPS)) + (1.0 - p) * libm::log((1.0 - c).max(LOG_EPS)))
}

fn bce_grad(c: f64, p: f64) -> f64 {
    let mut d = 0.0;
    if c > LOG_EPS {
        d -= p / c;
    }
    if 1.0 - c > LOG_EPS {
        d += (1.0 - p) / (1.0 - c);
    }
    d
}

/// KL divergence of two probability vectors with clamped logs.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (libm::log(pi.max(LOG_EPS)) - libm::log(qi.max(LOG_EPS))))
        .sum()
}

fn kl_of_logits(a: &[f64], b: &[f64]) -> f64 {
    kl_divergence(&softmax(a), &softmax(b))
}

/// Gradients of `KL(softmax(a) || softmax(b))` with respect to `a` and `b`.
fn kl_logit_grads(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = softmax(a);
    let q = softmax(b);
    let dp: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let lp = libm::log(pi.max(LOG_EPS));
            let lq = libm::log(qi.max(LOG_EPS));
            lp - lq + if pi > LOG_EPS { 1.0 } else { 0.0 }
        })
        .collect();
    let dq: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| if qi > LOG_EPS { -pi / qi } else { 0.0 })
        .collect();
    let mp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
    let mq: f64 = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
    (
        p.iter().zip(&dp).map(|(pi, d)| pi * (d - mp)).collect(),
        q.iter().zip(&dq).map(|(qi, d)| qi * (d - mq)).collect(),
    )
}

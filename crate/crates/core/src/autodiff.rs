//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only. Operations that consume
//! parameters refer to them by [`ParamId`] instead of copying them onto the
//! tape, so many tapes can run concurrently against one model snapshot.
//! Backward passes write parameter gradients into a fresh [`Gradients`]
//! buffer; only trainable parameters receive entries, and sub-graphs that
//! depend on nothing trainable are skipped entirely.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Matrix};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row: `(column, value)` pairs with strictly increasing columns.
pub type SparseRow = Vec<(usize, f64)>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Cls,
    Mean,
    Max,
}

enum Op {
    Input,
    Embed {
        table: ParamId,
        position: ParamId,
        ids: Vec<usize>,
    },
    Linear {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    SparseLinear {
        rows: Vec<SparseRow>,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: ParamId,
        bias: ParamId,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        valid: Vec<bool>,
        argmax: Vec<usize>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    AbsDiff(Var, Var),
    Mul(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Backward {
    pub params: Gradients,
    inputs: Vec<Option<Matrix>>,
}

impl Backward {
    /// Gradient with respect to an input node created with `needs_grad`.
    pub fn input_grad(&self, v: Var) -> Option<&Matrix> {
        self.inputs.get(v.0).and_then(Option::as_ref)
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn trainable(&self, p: ParamId) -> bool {
        self.store.is_trainable(p)
    }

    pub fn input(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.push(value, Op::Input, needs_grad)
    }

    /// `table[ids[i]] + position[i]` for each row `i`.
    pub fn embed(&mut self, table: ParamId, position: ParamId, ids: &[usize]) -> Var {
        let t = self.store.value(table);
        let p = self.store.value(position);
        assert!(ids.len() <= p.rows, "sequence longer than position table");
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            let row = out.row_mut(i);
            for ((o, a), b) in row.iter_mut().zip(t.row(id)).zip(p.row(i)) {
                *o = a + b;
            }
        }
        let ng = self.trainable(table) || self.trainable(position);
        self.push(
            out,
            Op::Embed {
                table,
                position,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// `x · W + b` with `W` stored as `in × out`.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>) -> Var {
        let w = self.store.value(weight);
        let xv = self.value(x);
        assert_eq!(xv.cols, w.rows, "linear input width");
        let mut out = Matrix::zeros(xv.rows, w.cols);
        matmul_acc(&xv.data, &w.data, &mut out.data, xv.rows, xv.cols, w.cols);
        if let Some(b) = bias {
            let bv = &self.store.value(b).data;
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.trainable(weight) || bias.is_some_and(|b| self.trainable(b));
        self.push(out, Op::Linear { x, weight, bias }, ng)
    }

    /// Sparse rows times a dense `in × out` weight.
    pub fn sparse_linear(
        &mut self,
        rows: Vec<SparseRow>,
        weight: ParamId,
        bias: Option<ParamId>,
    ) -> Var {
        let w = self.store.value(weight);
        let mut out = Matrix::zeros(rows.len(), w.cols);
        for (r, row) in rows.iter().enumerate() {
            let o = out.row_mut(r);
            for &(c, v) in row {
                for (oo, ww) in o.iter_mut().zip(w.row(c)) {
                    *oo += v * ww;
                }
            }
            if let Some(b) = bias {
                for (oo, bb) in o.iter_mut().zip(&self.store.value(b).data) {
                    *oo += bb;
                }
            }
        }
        let ng = self.trainable(weight) || bias.is_some_and(|b| self.trainable(b));
        self.push(out, Op::SparseLinear { rows, weight, bias }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.store.value(gain).data;
        let b = &self.store.value(bias).data;
        let mut normed = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let n = normed.row_mut(r);
            for (nv, v) in n.iter_mut().zip(row) {
                *nv = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = normed.data[r * cols + c] * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.trainable(gain) || self.trainable(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            let u = GELU_C * (*v + GELU_A * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Multiplies elementwise by a precomputed inverted-dropout mask
    /// (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(mask.len(), out.data.len(), "dropout mask length");
        for (v, m) in out.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Multi-head scaled dot-product attention. `key_valid[j] == false`
    /// excludes key `j` for every query (additive -inf before the softmax).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_valid: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, hidden) = qv.shape();
        assert_eq!(kv.shape(), (n, hidden));
        assert_eq!(vv.shape(), (n, hidden));
        assert_eq!(key_valid.len(), n);
        assert_eq!(hidden % heads, 0);
        let d = hidden / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Matrix::zeros(n, hidden);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * d;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &qv.data[i * hidden + off..i * hidden + off + d];
                let prow = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let s = if key_valid[j] {
                        dot(qi, &kv.data[j * hidden + off..j * hidden + off + d]) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in prow.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in prow.iter_mut() {
                    *s /= sum;
                }
                let orow = &mut out.data[i * hidden + off..i * hidden + off + d];
                for j in 0..n {
                    let pij = prow[j];
                    if pij == 0.0 {
                        continue;
                    }
                    let vj = &vv.data[j * hidden + off..j * hidden + off + d];
                    for (o, vjv) in orow.iter_mut().zip(vj) {
                        *o += pij * vjv;
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Reduces rows to a single `1 × cols` row. `Cls` takes row 0; `Mean` and
    /// `Max` use only rows with `valid[r]`.
    pub fn pool(&mut self, x: Var, kind: PoolKind, valid: &[bool]) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(valid.len(), rows);
        let mut out = vec![0.0; cols];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Cls => out.copy_from_slice(xv.row(0)),
            PoolKind::Mean => {
                let count = valid.iter().filter(|v| **v).count();
                assert!(count > 0, "mean pool over empty mask");
                for r in (0..rows).filter(|r| valid[*r]) {
                    for (o, v) in out.iter_mut().zip(xv.row(r)) {
                        *o += v;
                    }
                }
                for o in &mut out {
                    *o /= count as f64;
                }
            }
            PoolKind::Max => {
                argmax = vec![usize::MAX; cols];
                let mut best = vec![f64::NEG_INFINITY; cols];
                for r in (0..rows).filter(|r| valid[*r]) {
                    for (c, v) in xv.row(r).iter().enumerate() {
                        if *v > best[c] {
                            best[c] = *v;
                            argmax[c] = r;
                        }
                    }
                }
                assert!(
                    argmax.iter().all(|a| *a != usize::MAX),
                    "max pool over empty mask"
                );
                out = best;
            }
        }
        let ng = self.ng(x);
        self.push(
            Matrix::row_vector(out),
            Op::Pool {
                x,
                kind,
                valid: valid.to_vec(),
                argmax,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), xv.cols);
        for (i, &r) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows, rows, "concat row mismatch");
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y).abs())
            .collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AbsDiff(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `Σᵢ weights[i] · (logsumexp(logits[i]) − logits[i][targets[i]])`,
    /// returned as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        assert_eq!(lv.rows, weights.len());
        let mut probs = Matrix::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for r in 0..lv.rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = probs.row_mut(r);
            for (p, v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            let lse = max + sum.ln();
            total += weights[r] * (lse - row[targets[r]]);
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// `Σ coef · x` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms
            .iter()
            .map(|(v, c)| {
                let m = self.value(*v);
                assert_eq!(m.shape(), (1, 1), "weighted_sum expects scalars");
                c * m.data[0]
            })
            .sum();
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Backward pass from a scalar node with unit seed.
    pub fn backward(&self, loss: Var) -> Backward {
        self.backward_seeded(&[(loss, Matrix::scalar(1.0))])
    }

    /// Backward pass from arbitrary seeds `dL/dv` on any nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Matrix)]) -> Backward {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut params = Gradients::for_store(self.store);
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            acc(&mut grads[v.0], g);
        }
        let mut inputs = vec![None; self.nodes.len()];
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads, &mut params);
            if matches!(node.op, Op::Input) {
                inputs[idx] = Some(g);
            }
        }
        Backward { params, inputs }
    }

    fn param_grad<'g>(&self, params: &'g mut Gradients, p: ParamId) -> Option<&'g mut Matrix> {
        if self.trainable(p) {
            Some(params.entry(p, self.store.value(p).shape()))
        } else {
            None
        }
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        params: &mut Gradients,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Embed {
                table,
                position,
                ids,
            } => {
                if let Some(gt) = self.param_grad(params, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                if let Some(gp) = self.param_grad(params, *position) {
                    for i in 0..ids.len() {
                        for (a, b) in gp.row_mut(i).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Linear { x, weight, bias } => {
                let w = self.store.value(*weight);
                let xv = self.value(*x);
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    matmul_a_bt_acc(&g.data, &w.data, &mut dx.data, g.rows, g.cols, w.rows);
                    acc_owned(&mut grads[x.0], dx);
                }
                if let Some(gw) = self.param_grad(params, *weight) {
                    matmul_at_b_acc(&xv.data, &g.data, &mut gw.data, xv.rows, xv.cols, g.cols);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.param_grad(params, *b) {
                        add_col_sums(gb, g);
                    }
                }
            }
            Op::SparseLinear { rows, weight, bias } => {
                if let Some(gw) = self.param_grad(params, *weight) {
                    for (r, row) in rows.iter().enumerate() {
                        for &(c, v) in row {
                            for (a, b) in gw.row_mut(c).iter_mut().zip(g.row(r)) {
                                *a += v * b;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.param_grad(params, *b) {
                        add_col_sums(gb, g);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        acc(&mut grads[v.0], g);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = &self.store.value(*gain).data;
                if let Some(gg) = self.param_grad(params, *gain) {
                    for r in 0..g.rows {
                        for ((a, gr), n) in gg.data.iter_mut().zip(g.row(r)).zip(normed.row(r)) {
                            *a += gr * n;
                        }
                    }
                }
                if let Some(gb) = self.param_grad(params, *bias) {
                    add_col_sums(gb, g);
                }
                if self.ng(*x) {
                    let cols = g.cols as f64;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for c in 0..g.cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dn += d * nr[c];
                        }
                        mean_d /= cols;
                        mean_dn /= cols;
                        let out = dx.row_mut(r);
                        for c in 0..g.cols {
                            let d = gr[c] * gv[c];
                            out[c] = inv_std[r] * (d - mean_d - nr[c] * mean_dn);
                        }
                    }
                    acc_owned(&mut grads[x.0], dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, gv)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                acc_owned(&mut grads[x.0], Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::Tanh(x) => {
                let data = node
                    .value
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(t, gv)| gv * (1.0 - t * t))
                    .collect();
                acc_owned(&mut grads[x.0], Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc_owned(&mut grads[x.0], Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::Dropout { x, mask } => {
                let data = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc_owned(&mut grads[x.0], Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Pool {
                x,
                kind,
                valid,
                argmax,
            } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                match kind {
                    PoolKind::Cls => dx.row_mut(0).copy_from_slice(&g.data),
                    PoolKind::Mean => {
                        let count = valid.iter().filter(|v| **v).count() as f64;
                        for r in (0..xv.rows).filter(|r| valid[*r]) {
                            for (d, gv) in dx.row_mut(r).iter_mut().zip(&g.data) {
                                *d = gv / count;
                            }
                        }
                    }
                    PoolKind::Max => {
                        for (c, &r) in argmax.iter().enumerate() {
                            dx.data[r * xv.cols + c] += g.data[c];
                        }
                    }
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                for (i, &r) in index.iter().enumerate() {
                    for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols;
                    if self.ng(*p) {
                        let mut dp = Matrix::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            dp.row_mut(r)
                                .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + pc]);
                        }
                        acc_owned(&mut grads[p.0], dp);
                    }
                    off += pc;
                }
            }
            Op::AbsDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sign: Vec<f64> = av
                    .data
                    .iter()
                    .zip(&bv.data)
                    .zip(&g.data)
                    .map(|((x, y), gv)| {
                        if x > y {
                            *gv
                        } else if x < y {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.ng(*a) {
                    acc_owned(
                        &mut grads[a.0],
                        Matrix::from_vec(g.rows, g.cols, sign.clone()),
                    );
                }
                if self.ng(*b) {
                    let neg = sign.iter().map(|s| -s).collect();
                    acc_owned(&mut grads[b.0], Matrix::from_vec(g.rows, g.cols, neg));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = bv.data.iter().zip(&g.data).map(|(y, gv)| y * gv).collect();
                    acc_owned(&mut grads[a.0], Matrix::from_vec(g.rows, g.cols, d));
                }
                if self.ng(*b) {
                    let d = av.data.iter().zip(&g.data).map(|(x, gv)| x * gv).collect();
                    acc_owned(&mut grads[b.0], Matrix::from_vec(g.rows, g.cols, d));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let seed = g.data[0];
                let mut d = probs.clone();
                for r in 0..d.rows {
                    let w = seed * weights[r];
                    let row = d.row_mut(r);
                    row[targets[r]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                acc_owned(&mut grads[logits.0], d);
            }
            Op::WeightedSum(terms) => {
                for (v, c) in terms {
                    if self.ng(*v) {
                        acc_owned(&mut grads[v.0], Matrix::scalar(c * g.data[0]));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Matrix],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, hidden) = qv.shape();
        let d = hidden / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Matrix::zeros(n, hidden);
        let mut dk = Matrix::zeros(n, hidden);
        let mut dv = Matrix::zeros(n, hidden);
        let mut dp = vec![0.0; n];
        for (h, p) in probs.iter().enumerate() {
            let off = h * d;
            for i in 0..n {
                let gi = &g.data[i * hidden + off..i * hidden + off + d];
                let prow = p.row(i);
                // dP[i, j] = <dO_i, V_j>; dV_j += P[i, j] dO_i
                let mut weighted = 0.0;
                for j in 0..n {
                    let pij = prow[j];
                    if pij == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vv.data[j * hidden + off..j * hidden + off + d];
                    dp[j] = dot(gi, vj);
                    weighted += pij * dp[j];
                    let dvj = &mut dv.data[j * hidden + off..j * hidden + off + d];
                    for (a, b) in dvj.iter_mut().zip(gi) {
                        *a += pij * b;
                    }
                }
                // dS[i, j] = P[i, j] (dP[i, j] - Σ_l P[i, l] dP[i, l])
                let qi = &qv.data[i * hidden + off..i * hidden + off + d];
                for j in 0..n {
                    let pij = prow[j];
                    if pij == 0.0 {
                        continue;
                    }
                    let ds = pij * (dp[j] - weighted) * scale;
                    let kj = &kv.data[j * hidden + off..j * hidden + off + d];
                    let dqi = &mut dq.data[i * hidden + off..i * hidden + off + d];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let dkj = &mut dk.data[j * hidden + off..j * hidden + off + d];
                    for (a, b) in dkj.iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        if self.ng(q) {
            acc_owned(&mut grads[q.0], dq);
        }
        if self.ng(k) {
            acc_owned(&mut grads[k.0], dk);
        }
        if self.ng(v) {
            acc_owned(&mut grads[v.0], dv);
        }
    }
}

fn acc(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(m) => m.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn acc_owned(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(m) => m.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn add_col_sums(target: &mut Matrix, g: &Matrix) {
    for r in 0..g.rows {
        for (a, b) in target.data.iter_mut().zip(g.row(r)) {
            *a += b;
        }
    }
}

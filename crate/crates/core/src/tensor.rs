//! Dense row-major matrices and a small reverse-mode autodiff tape.
//!
//! The tape records one [`Graph`] per forward pass. Parameters live in a
//! [`ParamStore`] that the graph borrows immutably, so several graphs can run
//! against one frozen store at the same time. Backpropagation returns a
//! [`Gradients`] buffer aligned with the store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over strided views.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`, all described by
/// (row stride, column stride) pairs so transposes and column windows are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * c_strides.0 + j * c_strides.1;
                c[idx] *= beta;
            }
        }
        return;
    }
    let max_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let max_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    let max_c = (m - 1) * c_strides.0 + (n - 1) * c_strides.1;
    assert!(max_a < a.len() && max_b < b.len() && max_c < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Plain matrix product, optionally with `b` transposed.
pub fn matmul(a: &Matrix, b: &Matrix, trans_b: bool) -> Matrix {
    let (bk, bn, bs) = if trans_b {
        (b.cols, b.rows, (1, b.cols))
    } else {
        (b.rows, b.cols, (b.cols, 1))
    };
    assert_eq!(a.cols, bk, "matmul inner dimension mismatch");
    let mut out = Matrix::zeros(a.rows, bn);
    gemm(
        a.rows,
        a.cols,
        bn,
        1.0,
        &a.data,
        (a.cols, 1),
        &b.data,
        bs,
        0.0,
        &mut out.data,
        (bn, 1),
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Appends every parameter of `other` with `prefix` prepended to its name.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) -> Vec<ParamId> {
        other
            .names
            .into_iter()
            .zip(other.values)
            .map(|(n, v)| self.add(format!("{prefix}{n}"), v))
            .collect()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn slot(&mut self, id: ParamId, rows: usize, cols: usize) -> &mut Matrix {
        self.grads[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<Matrix>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Rows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sigmoid(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
        eps: f64,
    },
    SoftmaxCe {
        logits: Var,
        gold: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A forward pass recorded for reverse-mode differentiation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'s> Graph<'s> {
    /// Inference-mode graph: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn with_dropout(store: &'s ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        if rate > 0.0 {
            g.dropout = Some((rate, rng));
        }
        g
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Rows of an embedding table selected by `ids`.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let out = self.store.get(table).select_rows(ids);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b), false);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
        )
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b), true);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
        )
    }

    /// `x + bias` with the `1 x cols` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        assert_eq!(b.cols, self.value(x).cols);
        let mut out = self.value(x).clone();
        let cols = out.cols;
        for r in 0..out.rows {
            for (o, bv) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Affine x·W + b.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, eps: f64) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let xm = self.value(x);
        let (rows, cols) = (xm.rows, xm.cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gv).data.clone();
        let b = self.value(bv).data.clone();
        let mut out = xhat.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    /// Inverted dropout; identity in inference mode.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - *rate;
        let n = match &self.nodes[x.0].value {
            Value::Owned(m) => m.data.len(),
            Value::Param(id) => self.store.get(*id).data.len(),
        };
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `n x d` with `d` split evenly over `heads`. Each
    /// `(start, len)` segment attends only within itself; together the
    /// segments must tile all `n` rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qm.rows, qm.cols);
        assert_eq!(d % heads, 0);
        assert_eq!(segments.iter().map(|s| s.1).sum::<usize>(), n);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let off = start * d + h * dh;
                let mut scores = Matrix::zeros(len, len);
                gemm(
                    len,
                    dh,
                    len,
                    scale,
                    &qm.data[off..],
                    (d, 1),
                    &km.data[off..],
                    (1, d),
                    0.0,
                    &mut scores.data,
                    (len, 1),
                );
                for r in 0..len {
                    let row = scores.row_mut(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                gemm(
                    len,
                    len,
                    dh,
                    1.0,
                    &scores.data,
                    (len, 1),
                    &vm.data[off..],
                    (d, 1),
                    0.0,
                    &mut out.data[off..],
                    (d, 1),
                );
                probs.push(scores);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        )
    }

    /// Rows of `x` picked by index (repeats allowed).
    pub fn rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select_rows(rows);
        self.push(
            out,
            Op::Rows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Stacks the parts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat width mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::Concat(parts.to_vec()))
    }

    /// Mean binary cross entropy of probabilities `p` against 0/1 `labels`,
    /// with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Var {
        let pm = self.value(p);
        assert_eq!(pm.data.len(), labels.len());
        let loss = bce_value(&pm.data, labels, eps);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
        )
    }

    /// Cross entropy of a softmax over all entries of `logits` against `gold`.
    pub fn softmax_ce(&mut self, logits: Var, gold: usize) -> Var {
        let l = &self.value(logits).data;
        assert!(gold < l.len());
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(l[gold] - max - z.ln());
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::SoftmaxCe {
                logits,
                gold,
                probs,
            },
        )
    }

    /// Backpropagates from the scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let lm = self.value(loss);
        assert_eq!((lm.rows, lm.cols), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        let mut out = Gradients::zeros_like(self.store);

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Gather { table, ids } => {
                    let t = self.store.get(*table);
                    let slot = out.slot(*table, t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, gv) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *s += gv;
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    // C = A B  : dA = dC B^T, dB = A^T dC
                    // C = A B^T: dA = dC B,   dB = dC^T A
                    let ga = matmul(&g, bm, !trans_b);
                    let mut gb = Matrix::zeros(bm.rows, bm.cols);
                    if *trans_b {
                        gemm(
                            g.cols,
                            g.rows,
                            am.cols,
                            1.0,
                            &g.data,
                            (1, g.cols),
                            &am.data,
                            (am.cols, 1),
                            0.0,
                            &mut gb.data,
                            (bm.cols, 1),
                        );
                    } else {
                        gemm(
                            am.cols,
                            am.rows,
                            g.cols,
                            1.0,
                            &am.data,
                            (1, am.cols),
                            &g.data,
                            (g.cols, 1),
                            0.0,
                            &mut gb.data,
                            (bm.cols, 1),
                        );
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow { x, bias } => {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, gv) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += gv;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = &self.value(*gamma).data;
                    let cols = g.cols;
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            gg.data[c] += gr[c] * xr[c];
                            gbeta.data[c] += gr[c];
                            let dxh = gr[c] * gam[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xr[c];
                        }
                        let n = cols as f64;
                        let out_row = gx.row_mut(r);
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            out_row[c] = inv_std[r] / n
                                * (n * dxh - sum_dxhat - xr[c] * sum_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xm = self.value(*x);
                    let mut gx = g;
                    for (gv, xv) in gx.data.iter_mut().zip(&xm.data) {
                        *gv *= gelu_grad(*xv);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(idx));
                    let mut gx = g;
                    for (gv, yv) in gx.data.iter_mut().zip(&y.data) {
                        *gv *= yv * (1.0 - yv);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (gv, m) in gx.data.iter_mut().zip(mask) {
                        *gv *= m;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = (qm.rows, qm.cols);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Matrix::zeros(n, d);
                    let mut gk = Matrix::zeros(n, d);
                    let mut gv = Matrix::zeros(n, d);
                    let mut pi = 0;
                    for &(start, len) in segments {
                        for h in 0..*heads {
                            let p = &probs[pi];
                            pi += 1;
                            let off = start * d + h * dh;
                            // dV = P^T dO
                            gemm(
                                len,
                                len,
                                dh,
                                1.0,
                                &p.data,
                                (1, len),
                                &g.data[off..],
                                (d, 1),
                                0.0,
                                &mut gv.data[off..],
                                (d, 1),
                            );
                            // dP = dO V^T
                            let mut dp = Matrix::zeros(len, len);
                            gemm(
                                len,
                                dh,
                                len,
                                1.0,
                                &g.data[off..],
                                (d, 1),
                                &vm.data[off..],
                                (1, d),
                                0.0,
                                &mut dp.data,
                                (len, 1),
                            );
                            // dS = P * (dP - rowsum(dP * P))
                            for r in 0..len {
                                let pr = p.row(r);
                                let dr = dp.row_mut(r);
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (dv, pv) in dr.iter_mut().zip(pr) {
                                    *dv = pv * (*dv - dot);
                                }
                            }
                            // dQ = scale dS K ; dK = scale dS^T Q
                            gemm(
                                len,
                                len,
                                dh,
                                scale,
                                &dp.data,
                                (len, 1),
                                &km.data[off..],
                                (d, 1),
                                0.0,
                                &mut gq.data[off..],
                                (d, 1),
                            );
                            gemm(
                                len,
                                len,
                                dh,
                                scale,
                                &dp.data,
                                (1, len),
                                &qm.data[off..],
                                (d, 1),
                                0.0,
                                &mut gk.data[off..],
                                (d, 1),
                            );
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::Rows { x, rows } => {
                    let xm = self.value(*x);
                    let mut gx = Matrix::zeros(xm.rows, xm.cols);
                    for (src, &dst) in rows.iter().enumerate() {
                        for (s, gv) in gx.row_mut(dst).iter_mut().zip(g.row(src)) {
                            *s += gv;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pm = self.value(p);
                        let len = pm.data.len();
                        let gp = Matrix::from_vec(
                            pm.rows,
                            pm.cols,
                            g.data[offset..offset + len].to_vec(),
                        );
                        offset += len;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Bce { p, labels, eps } => {
                    let pm = self.value(*p);
                    let n = labels.len() as f64;
                    let upstream = g.data[0];
                    let mut gp = Matrix::zeros(pm.rows, pm.cols);
                    for ((o, &pv), &y) in gp.data.iter_mut().zip(&pm.data).zip(labels) {
                        if pv <= *eps || pv >= 1.0 - *eps {
                            continue;
                        }
                        *o = upstream * (-(y / pv) + (1.0 - y) / (1.0 - pv)) / n;
                    }
                    acc(&mut grads, *p, gp);
                }
                Op::SoftmaxCe {
                    logits,
                    gold,
                    probs,
                } => {
                    let lm = self.value(*logits);
                    let upstream = g.data[0];
                    let mut gl = Matrix::zeros(lm.rows, lm.cols);
                    for (i, (o, p)) in gl.data.iter_mut().zip(probs).enumerate() {
                        let y = if i == *gold { 1.0 } else { 0.0 };
                        *o = upstream * (p - y);
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

/// Mean clamped binary cross entropy.
pub fn bce_value(probs: &[f64], labels: &[f64], eps: f64) -> f64 {
    let n = probs.len() as f64;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    -total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Central-difference check of every parameter entry against the tape.
    fn check<F>(store: &mut ParamStore, build: F, tol: f64)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).data.len();
            for i in 0..n {
                let orig = store.get(id).data[i];
                store.get_mut(id).data[i] = orig + h;
                let up = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.value(l).data[0]
                };
                store.get_mut(id).data[i] = orig - h;
                let down = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.value(l).data[0]
                };
                store.get_mut(id).data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |m| m.data[i]);
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "{}[{i}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 5);
        let c = matmul(&a, &b, false);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
        let bt = rand_matrix(&mut rng, 5, 4);
        let c = matmul(&a, &bt, true);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * bt.get(j, k)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_linear_gelu_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_matrix(&mut rng, 4, 6));
        let w = store.add("w", rand_matrix(&mut rng, 6, 5));
        let b = store.add("b", rand_matrix(&mut rng, 1, 5));
        let gm = store.add("gamma", rand_matrix(&mut rng, 1, 5));
        let bt = store.add("beta", rand_matrix(&mut rng, 1, 5));
        let head = store.add("head", rand_matrix(&mut rng, 5, 1));
        check(
            &mut store,
            |g| {
                let xv = g.param(x);
                let h = g.linear(xv, w, b);
                let h = g.gelu(h);
                let h = g.layer_norm(h, gm, bt, 1e-5);
                let hw = g.param(head);
                let logits = g.matmul(h, hw);
                let p = g.sigmoid(logits);
                g.bce(p, &[1.0, 0.0, 0.0, 1.0], 1e-7)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_attention_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let q = store.add("q", rand_matrix(&mut rng, 5, 4));
        let k = store.add("k", rand_matrix(&mut rng, 5, 4));
        let v = store.add("v", rand_matrix(&mut rng, 5, 4));
        let head = store.add("head", rand_matrix(&mut rng, 4, 1));
        check(
            &mut store,
            |g| {
                let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
                let a = g.attention(qv, kv, vv, 2, &[(0, 2), (2, 3)]);
                let hw = g.param(head);
                let logits = g.matmul(a, hw);
                let rows = g.rows(logits, &[4, 0, 2]);
                let t = g.matmul_t(rows, rows);
                let flat = g.rows(t, &[0]);
                g.softmax_ce(flat, 1)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_gather_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let table = store.add("table", rand_matrix(&mut rng, 6, 3));
        let head = store.add("head", rand_matrix(&mut rng, 3, 1));
        check(
            &mut store,
            |g| {
                let a = g.gather(table, &[1, 1, 4]);
                let b = g.gather(table, &[0]);
                let c = g.concat_rows(&[a, b]);
                let hw = g.param(head);
                let l = g.matmul(c, hw);
                let p = g.sigmoid(l);
                g.bce(p, &[0.0, 1.0, 0.0, 0.0], 1e-7)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_rows_sum_to_value_mix() {
        let mut store = ParamStore::new();
        let ones = store.add("v", Matrix::from_vec(3, 2, vec![1.0; 6]));
        let mut g = Graph::new(&store);
        let v = g.param(ones);
        let out = g.attention(v, v, v, 1, &[(0, 3)]);
        assert!(g.value(out).data().iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let d = g.dropout(v);
        assert_eq!(v, d);
    }
}

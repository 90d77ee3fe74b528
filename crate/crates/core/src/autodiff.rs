//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! trainable ([`Tape::param`]) or constant ([`Tape::constant`]); gradients are
//! only propagated along paths that reach a trainable leaf. [`Tape::backward`]
//! may be called once per tape.

use crate::error::{Error, Result};
use crate::tensor::{expect_matrix, kernels, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    RowRescale {
        w: Var,
        m: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        gold: usize,
    },
    BceWithLogits {
        x: Var,
        idx: Vec<usize>,
        labels: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::contract("variable does not belong to this tape"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used for `x · Wᵀ` with `W` stored
    /// as `d_out×d_in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_matrix(self.value(a), "matmul_nt lhs must be 2-D")?;
        let (n, k2) = expect_matrix(self.value(b), "matmul_nt rhs must be 2-D")?;
        if k != k2 {
            return Err(Error::Shape {
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
                context: "matmul_nt inner dimensions",
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
                context,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[..×d] + bias[d]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(bias).shape() != [d] {
            return Err(Error::Shape {
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
                context: "add_row bias must match the last axis",
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect();
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = crate::tensor::gelu(self.value(x));
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = crate::tensor::softmax(self.value(x), axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = crate::tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = expect_matrix(self.value(table), "gather table must be 2-D")?;
        if ids.is_empty() {
            return Err(Error::contract("gather with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, len: rows });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row `row` of a 2-D value, as a `[1×cols]` tensor.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (rows, cols) = expect_matrix(self.value(x), "select_row input must be 2-D")?;
        if row >= rows {
            return Err(Error::Index { index: row, len: rows });
        }
        let out = Tensor::from_parts(vec![1, cols], self.value(x).row(row).to_vec());
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectRow { x, row }, rg))
    }

    /// Column means of a 2-D value, as a `[1×cols]` tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = expect_matrix(self.value(x), "mean_rows input must be 2-D")?;
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(r)) {
                *o += v;
            }
        }
        let n = T::c(rows as f64);
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, cols], out), Op::MeanRows(x), rg))
    }

    /// Unmasked multi-head scaled dot-product attention over `[n×H]`
    /// projections; head `h` uses columns `h·d..(h+1)·d` with `d = H/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, h) = expect_matrix(self.value(q), "attention q must be 2-D")?;
        for other in [k, v] {
            self.same_shape(q, other, "attention q/k/v")?;
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::config(format!("hidden {h} not divisible by {heads} heads")));
        }
        let d = h / heads;
        let scale = T::c(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * h];
        for hd in 0..heads {
            let off = hd * d;
            for i in 0..n {
                let p = &mut probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                let qi = &qd[i * h + off..i * h + off + d];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = kernels::dot(qi, &kd[j * h + off..j * h + off + d]) * scale;
                }
                kernels::softmax_in_place(p);
                let orow = &mut out[i * h + off..i * h + off + d];
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vv) in orow.iter_mut().zip(&vd[j * h + off..j * h + off + d]) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![n, h], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// `out[i,:] = m[i] · w[i,:] / max(‖w[i,:]‖₂, eps)`.
    pub fn row_rescale(&mut self, w: Var, m: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = expect_matrix(self.value(w), "row_rescale weight must be 2-D")?;
        if self.value(m).shape() != [rows] {
            return Err(Error::Shape {
                lhs: self.value(w).shape().to_vec(),
                rhs: self.value(m).shape().to_vec(),
                context: "row_rescale magnitude must have one entry per row",
            });
        }
        let wv = self.value(w);
        let mv = self.value(m).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = wv.row(r);
            let norm = kernels::dot(row, row).sqrt().max(T::c(eps));
            let s = mv[r] / norm;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = s * x;
            }
        }
        let rg = self.any_grad(&[w, m]);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::RowRescale { w, m, eps }, rg))
    }

    /// `-log softmax(logits)[gold]` over every entry of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let loss = crate::tensor::cross_entropy_at_mask(self.value(logits), gold)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, gold }, rg))
    }

    /// Mean binary cross-entropy on the logits at `idx` against `labels`.
    pub fn bce_with_logits(&mut self, x: Var, idx: &[usize], labels: &[T]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::contract("binary cross-entropy over an empty span"));
        }
        if idx.len() != labels.len() {
            return Err(Error::contract("one label per selected logit"));
        }
        let xs = self.value(x).data();
        let mut total = T::zero();
        for (&i, &y) in idx.iter().zip(labels) {
            let z = *xs.get(i).ok_or(Error::Index { index: i, len: xs.len() })?;
            total += kernels::softplus(z) - z * y;
        }
        let loss = total / T::c(idx.len() as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x,
                idx: idx.to_vec(),
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(·) to every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape; record a new forward pass"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    // dA = dC · Bᵀ
                    kernels::mm_nt(g, val(*b).data(), da, m, n, k);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    // dB = Aᵀ · dC
                    kernels::mm_tn(val(*a).data(), g, db, k, m, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    kernels::mm_nn(g, val(*b).data(), da, m, n, k);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    kernels::mm_tn(g, val(*a).data(), db, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = grad_slot(&self.nodes, grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *bias) {
                    let c = db.len();
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = grad_slot(&self.nodes, grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        *d += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dotp = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x);
                let h = xv.cols();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); h];
                let mut dbeta = vec![T::zero(); h];
                let mut dx_all = vec![T::zero(); xv.numel()];
                let hn = T::c(h as f64);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, rstd) = kernels::moments(row, *eps);
                    let gr = &g[r * h..(r + 1) * h];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..h {
                        let xhat = (row[j] - mean) * rstd;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        let dxhat = gr[j] * gam[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..h {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = gr[j] * gam[j];
                        dx_all[r * h + j] = rstd * (dxhat - sum_dxhat / hn - xhat * sum_dxhat_xhat / hn);
                    }
                }
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    dx.iter_mut().zip(&dx_all).for_each(|(d, &v)| *d += v);
                }
                if let Some(dg) = grad_slot(&self.nodes, grads, *gamma) {
                    dg.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = grad_slot(&self.nodes, grads, *beta) {
                    db.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                if let Some(dt) = grad_slot(&self.nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::SelectRow { x, row } => {
                let c = node.value.numel();
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for j in 0..c {
                        dx[row * c + j] += g[j];
                    }
                }
            }
            Op::MeanRows(x) => {
                let c = node.value.numel();
                let rows = val(*x).rows();
                let inv = T::one() / T::c(rows as f64);
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for r in 0..rows {
                        for j in 0..c {
                            dx[r * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::RowRescale { w, m, eps } => {
                let wv = val(*w);
                let mv = val(*m).data();
                let cols = wv.cols();
                let mut dw_all = vec![T::zero(); wv.numel()];
                let mut dm_all = vec![T::zero(); mv.len()];
                for r in 0..wv.rows() {
                    let row = wv.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let raw = kernels::dot(row, row).sqrt();
                    let norm = raw.max(T::c(*eps));
                    let wg = kernels::dot(row, gr);
                    dm_all[r] = wg / norm;
                    let s = mv[r] / norm;
                    let clamped = raw < T::c(*eps);
                    for j in 0..cols {
                        let mut d = s * gr[j];
                        if !clamped {
                            d -= s * row[j] * wg / (norm * norm);
                        }
                        dw_all[r * cols + j] = d;
                    }
                }
                if let Some(dw) = grad_slot(&self.nodes, grads, *w) {
                    dw.iter_mut().zip(&dw_all).for_each(|(d, &v)| *d += v);
                }
                if let Some(dm) = grad_slot(&self.nodes, grads, *m) {
                    dm.iter_mut().zip(&dm_all).for_each(|(d, &v)| *d += v);
                }
            }
            Op::CrossEntropy { logits, gold } => {
                let mut p = val(*logits).data().to_vec();
                kernels::softmax_in_place(&mut p);
                p[*gold] -= T::one();
                if let Some(dl) = grad_slot(&self.nodes, grads, *logits) {
                    dl.iter_mut().zip(&p).for_each(|(d, &v)| *d += v * g[0]);
                }
            }
            Op::BceWithLogits { x, idx, labels } => {
                let xs = val(*x).data();
                let inv = T::one() / T::c(idx.len() as f64);
                let upd: Vec<(usize, T)> = idx
                    .iter()
                    .zip(labels)
                    .map(|(&i, &y)| (i, (kernels::sigmoid(xs[i]) - y) * inv * g[0]))
                    .collect();
                if let Some(dx) = grad_slot(&self.nodes, grads, *x) {
                    for (i, d) in upd {
                        dx[i] += d;
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
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let qv = &self.nodes[q.0].value;
        let (n, h) = (qv.shape()[0], qv.shape()[1]);
        let d = h / heads;
        let scale = T::c(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), self.nodes[k.0].value.data(), self.nodes[v.0].value.data());
        let mut dq = vec![T::zero(); n * h];
        let mut dk = vec![T::zero(); n * h];
        let mut dv = vec![T::zero(); n * h];
        let mut dp = vec![T::zero(); n];
        for hd in 0..heads {
            let off = hd * d;
            for i in 0..n {
                let p = &probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                let gi = &g[i * h + off..i * h + off + d];
                for j in 0..n {
                    dp[j] = kernels::dot(gi, &vd[j * h + off..j * h + off + d]);
                    for c in 0..d {
                        dv[j * h + off + c] += p[j] * gi[c];
                    }
                }
                let pdp = p.iter().zip(&dp).fold(T::zero(), |s, (&a, &b)| s + a * b);
                for j in 0..n {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..d {
                        dq[i * h + off + c] += ds * kd[j * h + off + c];
                        dk[j * h + off + c] += ds * qd[i * h + off + c];
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = grad_slot(&self.nodes, grads, var) {
                dst.iter_mut().zip(&buf).for_each(|(d, &x)| *d += x);
            }
        }
    }
}

/// Accumulation buffer of `v`, or `None` when `v` needs no gradient.
fn grad_slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(n.value.shape().to_vec()))
            .data_mut(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap());
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(1.0));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::eye(2));
        let b = tape.param(Tensor::eye(2));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.cross_entropy(l, 1).unwrap();
        let g = tape.backward(loss).unwrap();
        let p = crate::tensor::softmax(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let want = [p.data()[0], p.data()[1] - 1.0, p.data()[2]];
        for (a, b) in g.get(l).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_rescale_zero_row_stays_finite() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new(vec![2, 2], vec![3., 4., 0., 0.]).unwrap());
        let m = tape.param(Tensor::new(vec![2], vec![5., 0.]).unwrap());
        let y = tape.row_rescale(w, m, 1e-8).unwrap();
        assert!(tape.value(y).is_finite());
        assert_eq!(tape.value(y).data(), &[3., 4., 0., 0.]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).unwrap().is_finite());
    }
}

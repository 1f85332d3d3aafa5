// SPDX-License-Identifier: Apache-2.0

//! Differentiable operations and their vector-Jacobian products.

use std::sync::Arc;

use super::{Node, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::mask::Mask;
use crate::tensor::Tensor;

pub(super) enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Adds a constant; the gradient passes through unchanged.
    Shift(usize),
    MulConst(usize, Vec<f64>),
    AddRowBias(usize, usize),
    Exp(usize),
    Ln(usize),
    Ln1p(usize),
    Softplus(usize),
    Relu(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LogSumExpRows {
        x: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    Reshape(usize),
    MaskedFill {
        x: usize,
        allowed: Arc<[bool]>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Contract("operands recorded on different tapes".into()))
    }
}

fn check_mask(op: &'static str, shape: &[usize], mask: Option<&Mask>) -> Result<Option<Arc<[bool]>>> {
    match mask {
        None => Ok(None),
        Some(m) if shape == [m.rows(), m.cols()] => Ok(Some(m.shared())),
        Some(m) => Err(dim_err(op, shape, &[m.rows(), m.cols()])),
    }
}

// Fallible, so these cannot be the std::ops traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn derive(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'t> {
        let rg = self.tape.requires_grad(parents);
        self.tape.push(value, op, rg)
    }

    fn unary_map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().map(f);
        self.derive(value, op, &[self.id])
    }

    fn zip_same(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_tape(self, &other)?;
        let a = self.value_ref();
        let b = other.value_ref();
        if a.shape() != b.shape() {
            return Err(dim_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other)?;
        let value = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.derive(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value_ref().transpose()?;
        Ok(self.derive(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.derive(value, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.derive(value, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.derive(value, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary_map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary_map(Op::Shift(self.id), |x| x + c)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let a = self.value_ref();
        if a.shape() != c.shape() {
            return Err(dim_err("add_const", a.shape(), c.shape()));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        drop(a);
        Ok(self.derive(value, Op::Shift(self.id), &[self.id]))
    }

    /// Multiplies elementwise by a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let a = self.value_ref();
        if a.shape() != c.shape() {
            return Err(dim_err("mul_const", a.shape(), c.shape()));
        }
        let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        drop(a);
        Ok(self.derive(value, Op::MulConst(self.id, c.data().to_vec()), &[self.id]))
    }

    /// `x[i][j] + bias[j]` for a matrix `x` and a bias with `cols(x)` entries.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &bias)?;
        let x = self.value_ref();
        let b = bias.value_ref();
        let (_, n) = x.dims2()?;
        if b.len() != n {
            return Err(dim_err("add_row_bias", x.shape(), b.shape()));
        }
        let data = x
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(b.data()).map(|(v, c)| v + c))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        drop((x, b));
        Ok(self.derive(value, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary_map(Op::Ln(self.id), f64::ln)
    }

    pub fn ln_1p(self) -> Var<'t> {
        self.unary_map(Op::Ln1p(self.id), f64::ln_1p)
    }

    /// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
    pub fn softplus(self) -> Var<'t> {
        self.unary_map(Op::Softplus(self.id), kernels::softplus)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_map(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary_map(Op::Gelu(self.id), kernels::gelu)
    }

    /// Row-wise softmax with max subtraction. With a mask, excluded entries
    /// receive weight exactly zero.
    pub fn softmax_rows(self, mask: Option<&Mask>) -> Result<Var<'t>> {
        let x = self.value_ref();
        let (_, n) = x.dims2()?;
        let allowed = check_mask("softmax_rows", x.shape(), mask)?;
        let mut out = vec![0.0; x.len()];
        kernels::softmax_rows(x.data(), n, allowed.as_deref(), &mut out);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        drop(x);
        Ok(self.derive(value, Op::SoftmaxRows(self.id), &[self.id]))
    }

    /// Row-wise `log Σ_j exp(x_ij)` over allowed entries; shape `[rows]`.
    pub fn logsumexp_rows(self, mask: Option<&Mask>) -> Result<Var<'t>> {
        let x = self.value_ref();
        let (m, n) = x.dims2()?;
        let allowed = check_mask("logsumexp_rows", x.shape(), mask)?;
        let mut out = vec![0.0; m];
        kernels::logsumexp_rows(x.data(), n, allowed.as_deref(), &mut out);
        let mut probs = vec![0.0; x.len()];
        kernels::softmax_rows(x.data(), n, allowed.as_deref(), &mut probs);
        drop(x);
        Ok(self.derive(
            Tensor::vector(out),
            Op::LogSumExpRows { x: self.id, probs },
            &[self.id],
        ))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        same_tape(&self, &gamma)?;
        same_tape(&self, &beta)?;
        let x = self.value_ref();
        let (m, n) = x.dims2()?;
        let (g, b) = (gamma.value_ref(), beta.value_ref());
        if g.len() != n || b.len() != n {
            return Err(dim_err("layer_norm", x.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        drop((x, g, b));
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
        };
        Ok(self.derive(value, op, &[self.id, gamma.id, beta.id]))
    }

    /// Column means of a matrix, shape `[1, cols]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value_ref();
        let (m, n) = x.dims2()?;
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        drop(x);
        Ok(self.derive(Tensor::new(vec![1, n], out)?, Op::MeanRows(self.id), &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value_ref().sum();
        self.derive(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.value_ref().mean();
        self.derive(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let t = self.value_ref();
        let (v, d) = t.dims2()?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Input(format!("row index {i} out of range for {v} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        drop(t);
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let op = Op::GatherRows {
            table: self.id,
            indices: indices.to_vec(),
        };
        Ok(self.derive(value, op, &[self.id]))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value()
            .reshape(shape)?;
        Ok(self.derive(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Replaces entries the mask excludes by `fill`; those entries carry no
    /// gradient.
    pub fn masked_fill(self, mask: &Mask, fill: f64) -> Result<Var<'t>> {
        let x = self.value_ref();
        let allowed = check_mask("masked_fill", x.shape(), Some(mask))?.expect("mask given");
        let data = x
            .data()
            .iter()
            .zip(allowed.iter())
            .map(|(&v, &a)| if a { v } else { fill })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        drop(x);
        Ok(self.derive(value, Op::MaskedFill { x: self.id, allowed }, &[self.id]))
    }

    /// `-log softmax(logits)[label]`, via logsumexp. `logits` may have any
    /// shape; it is read as a flat vector of class scores.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t>> {
        let z = self.value_ref();
        let n = z.len();
        if label >= n {
            return Err(Error::Input(format!("label {label} out of range for {n} classes")));
        }
        let mut probs = vec![0.0; n];
        kernels::softmax_rows(z.data(), n, None, &mut probs);
        // log Σ exp(z_j − z_label), via ln_1p so a confident correct
        // prediction keeps full relative precision.
        let zl = z.data()[label];
        let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rest: f64 = z
            .data()
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &v)| (v - m).exp())
            .sum();
        let loss = if zl == m {
            rest.ln_1p()
        } else {
            (m - zl) + ((zl - m).exp() + rest).ln()
        };
        drop(z);
        let op = Op::CrossEntropy {
            logits: self.id,
            label,
            probs,
        };
        Ok(self.derive(Tensor::scalar(loss), op, &[self.id]))
    }
}

impl Tape {
    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let rows = first.value_ref().dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            same_tape(first, p)?;
            let v = p.value_ref();
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(dim_err("concat_cols", &first.shape(), v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value_ref();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(first.derive(value, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Stacks equally sized tensors as the rows of a `[parts, len]` matrix.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("stack_rows of nothing".into()))?;
        let len = first.value_ref().len();
        let mut out = Vec::with_capacity(parts.len() * len);
        for p in parts {
            same_tape(first, p)?;
            let v = p.value_ref();
            if v.len() != len {
                return Err(dim_err("stack_rows", &first.shape(), v.shape()));
            }
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(vec![parts.len(), len], out)?;
        Ok(first.derive(value, Op::StackRows(ids.clone()), &ids))
    }
}

/// Adjoint buffer for `id`, or `None` when the node needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(adj[id].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, g: impl Iterator<Item = f64>) {
    if let Some(s) = slot(nodes, adj, id) {
        for (a, x) in s.iter_mut().zip(g) {
            *a += x;
        }
    }
}

pub(super) fn backward_node(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let n = nodes[*b].value.cols();
            if let Some(s) = slot(nodes, adj, *a) {
                kernels::matmul_nt_acc(g, val(*b), s, m, n, k);
            }
            if let Some(s) = slot(nodes, adj, *b) {
                kernels::matmul_tn_acc(val(*a), g, s, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(s) = slot(nodes, adj, *a) {
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, adj, *a, g.iter().copied());
            add_into(nodes, adj, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            add_into(nodes, adj, *a, g.iter().copied());
            add_into(nodes, adj, *b, g.iter().map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
            add_into(nodes, adj, *a, g.iter().zip(&vb).map(|(x, y)| x * y));
            add_into(nodes, adj, *b, g.iter().zip(&va).map(|(x, y)| x * y));
        }
        Op::Scale(a, c) => add_into(nodes, adj, *a, g.iter().map(|x| x * c)),
        Op::Shift(a) | Op::Reshape(a) => add_into(nodes, adj, *a, g.iter().copied()),
        Op::MulConst(a, c) => add_into(nodes, adj, *a, g.iter().zip(c).map(|(x, y)| x * y)),
        Op::AddRowBias(x, b) => {
            add_into(nodes, adj, *x, g.iter().copied());
            let n = out.cols();
            if let Some(s) = slot(nodes, adj, *b) {
                for row in g.chunks(n) {
                    for (a, x) in s.iter_mut().zip(row) {
                        *a += x;
                    }
                }
            }
        }
        Op::Exp(a) => add_into(nodes, adj, *a, g.iter().zip(out.data()).map(|(x, y)| x * y)),
        Op::Ln(a) => add_into(nodes, adj, *a, g.iter().zip(val(*a)).map(|(x, v)| x / v)),
        Op::Ln1p(a) => add_into(nodes, adj, *a, g.iter().zip(val(*a)).map(|(x, v)| x / (1.0 + v))),
        Op::Softplus(a) => add_into(
            nodes,
            adj,
            *a,
            g.iter().zip(val(*a)).map(|(x, &v)| x * kernels::sigmoid(v)),
        ),
        Op::Relu(a) => add_into(
            nodes,
            adj,
            *a,
            g.iter().zip(val(*a)).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }),
        ),
        Op::Gelu(a) => add_into(
            nodes,
            adj,
            *a,
            g.iter().zip(val(*a)).map(|(x, &v)| x * kernels::gelu_grad(v)),
        ),
        Op::SoftmaxRows(a) => {
            let n = out.cols();
            if let Some(s) = slot(nodes, adj, *a) {
                for ((yr, gr), sr) in out.data().chunks(n).zip(g.chunks(n)).zip(s.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        sr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSumExpRows { x, probs } => {
            let n = nodes[*x].value.cols();
            if let Some(s) = slot(nodes, adj, *x) {
                for (r, (pr, sr)) in probs.chunks(n).zip(s.chunks_mut(n)).enumerate() {
                    for j in 0..n {
                        sr[j] += g[r] * pr[j];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let gm = val(*gamma).to_vec();
            if let Some(s) = slot(nodes, adj, *gamma) {
                for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                    for j in 0..n {
                        s[j] += hr[j] * gr[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, adj, *beta) {
                for gr in g.chunks(n) {
                    for j in 0..n {
                        s[j] += gr[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, adj, *x) {
                let nf = n as f64;
                for (r, ((hr, gr), sr)) in xhat.chunks(n).zip(g.chunks(n)).zip(s.chunks_mut(n)).enumerate() {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        sum_d += d;
                        sum_dh += d * hr[j];
                    }
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        sr[j] += inv_std[r] / nf * (nf * d - sum_d - hr[j] * sum_dh);
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            if let Some(s) = slot(nodes, adj, *a) {
                for sr in s.chunks_mut(n) {
                    for j in 0..n {
                        sr[j] += g[j] / m as f64;
                    }
                }
            }
        }
        Op::Sum(a) => add_into(nodes, adj, *a, std::iter::repeat(g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            add_into(nodes, adj, *a, std::iter::repeat(g[0] / n));
        }
        Op::GatherRows { table, indices } => {
            let d = out.cols();
            if let Some(s) = slot(nodes, adj, *table) {
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        s[i * d + j] += g[k * d + j];
                    }
                }
            }
        }
        Op::ConcatCols(ids) => {
            let (rows, total) = (out.rows(), out.cols());
            let mut offset = 0;
            for &p in ids {
                let w = nodes[p].value.cols();
                if let Some(s) = slot(nodes, adj, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            s[r * w + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::StackRows(ids) => {
            let len = out.cols();
            for (k, &p) in ids.iter().enumerate() {
                add_into(nodes, adj, p, g[k * len..(k + 1) * len].iter().copied());
            }
        }
        Op::MaskedFill { x, allowed } => add_into(
            nodes,
            adj,
            *x,
            g.iter().zip(allowed.iter()).map(|(x, &a)| if a { *x } else { 0.0 }),
        ),
        Op::CrossEntropy { logits, label, probs } => {
            let lbl = *label;
            add_into(
                nodes,
                adj,
                *logits,
                probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| g[0] * (p - if j == lbl { 1.0 } else { 0.0 })),
            );
        }
    }
}

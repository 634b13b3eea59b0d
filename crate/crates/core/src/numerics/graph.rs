use std::borrow::Cow;

use super::kernels::{self, gemm};
use super::{NumericsError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Nll {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Nodes are stored in
/// creation order, which is a topological order by construction.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant: no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed trainable leaf; avoids copying parameters into every graph.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a × bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul_t(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::MatMulT(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = x.with_shape_of(data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = xv.with_shape_of(data);
        let rg = self.requires_grad(x) || self.requires_grad(b);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = x.with_shape_of(data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = kernels::softmax_rows(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        if g.len() != xv.cols() || b.len() != xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (out, xhat, inv_std) =
            kernels::layer_norm_with_stats(xv, g.data(), b.data(), kernels::LAYER_NORM_EPS);
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(NumericsError::InvalidShape { shape: vec![0, cols] });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, bound: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), cols, data);
        let rg = self.requires_grad(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                bound: xv.cols(),
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(xv.rows(), len, data);
        let rg = self.requires_grad(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                left: self.value(parts[0]).shape().to_vec(),
                right: vec![],
            });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Summed token negative log-likelihood of `logits` (`T × V`) against
    /// `targets`; positions equal to `ignore_index` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var, NumericsError> {
        let weights = vec![1.0; targets.len()];
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| if Some(t) == ignore_index { None } else { Some(t) })
            .collect();
        self.nll(logits, targets, weights)
    }

    /// `Σ_t weights[t] · (−log softmax(logits_t)[targets[t]])`.
    pub fn weighted_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, NumericsError> {
        if weights.len() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_nll",
                left: vec![targets.len()],
                right: vec![weights.len()],
            });
        }
        self.nll(
            logits,
            targets.iter().copied().map(Some).collect(),
            weights.to_vec(),
        )
    }

    fn nll(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
    ) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut loss = 0.0;
        for (t, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    index: target,
                    bound: vocab,
                });
            }
            let row = lv.row(t);
            let lse = kernels::log_sum_exp(row);
            loss += weights[t] * (lse - row[target]);
            for (p, v) in probs[t * vocab..(t + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.requires_grad(logits);
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits,
                targets,
                weights,
                probs,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.requires_grad(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn backprop_node(&self, node: &Node<'a>, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(dy.data(), m, n, false, bv.data(), k, n, true, ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(av.data(), m, k, true, dy.data(), m, n, false, gb.data_mut(), 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(dy.data(), m, n, false, bv.data(), n, k, false, ga.data_mut(), 1.0);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(dy.data(), m, n, true, av.data(), m, k, false, gb.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.grad_slot(grads, *v) {
                        g.add_assign(dy);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.add_assign(dy);
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    let c = dy.cols();
                    for (i, v) in dy.data().iter().enumerate() {
                        g.data_mut()[i % c] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = self.grad_slot(grads, *a) {
                    for ((gi, d), q) in g.data_mut().iter_mut().zip(dy.data()).zip(bv.data()) {
                        *gi += d * q;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *b) {
                    for ((gi, d), p) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        *gi += d * p;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (gi, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gi += s * d;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((gi, d), v) in g.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                        if *v > 0.0 {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                if let Some(g) = self.grad_slot(grads, *x) {
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for (gi, (yv, dv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                            *gi += yv * (dv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = dy.cols();
                let rows = dy.rows();
                if let Some(g) = self.grad_slot(grads, *gain) {
                    for (i, d) in dy.data().iter().enumerate() {
                        g.data_mut()[i % cols] += d * xhat[i];
                    }
                }
                if let Some(g) = self.grad_slot(grads, *bias) {
                    for (i, d) in dy.data().iter().enumerate() {
                        g.data_mut()[i % cols] += d;
                    }
                }
                let gain_v = self.value(*gain).data().to_vec();
                if let Some(g) = self.grad_slot(grads, *x) {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = dy.row(r)[c] * gain_v[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / n;
                        for (c, gi) in g.row_mut(r).iter_mut().enumerate() {
                            *gi += scale * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(g) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (gi, d) in g.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    let len = dy.cols();
                    for r in 0..dy.rows() {
                        for (gi, d) in g.row_mut(r)[*start..start + len].iter_mut().zip(dy.row(r)) {
                            *gi += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if let Some(g) = self.grad_slot(grads, p) {
                        for r in 0..dy.rows() {
                            for (gi, d) in g
                                .row_mut(r)
                                .iter_mut()
                                .zip(&dy.row(r)[offset..offset + width])
                            {
                                *gi += d;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Nll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let upstream = dy.item();
                if let Some(g) = self.grad_slot(grads, *logits) {
                    let vocab = g.cols();
                    for (t, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        let w = weights[t] * upstream;
                        let p = &probs[t * vocab..(t + 1) * vocab];
                        let row = g.row_mut(t);
                        for (gi, pv) in row.iter_mut().zip(p) {
                            *gi += w * pv;
                        }
                        row[target] -= w;
                    }
                }
            }
            Op::Sum(x) => {
                let d = dy.item();
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.data_mut().iter_mut().for_each(|gi| *gi += d);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gather { .. } => "gather",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Nll { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
    }
}

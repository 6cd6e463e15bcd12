//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node whose parents were pushed
//! before it, so the node vector is already a topological order. Values are
//! computed eagerly on push. [`Tape::backward`] walks the vector once in
//! reverse and only propagates into nodes that can reach a trainable leaf.

use super::tensor::{
    axis_extents, gelu, gelu_derivative, layernorm_kernel, matmul_kernel, relu, softmax_kernel,
    transpose_kernel, Scalar, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operations dispatched through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Relu,
    Gelu,
    Scale(f64),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SelectRow {
        x: Var,
        row: usize,
    },
    Sum(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-threaded computation record for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Rows below this norm are treated as zero vectors by [`Tape::normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients flow into `v` during backward.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut value = t.with_requires_grad(false);
        value.zero_grad();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = av.matmul(bv)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if bv.is_scalar() {
            let s = bv.item();
            av.data().iter().map(|&x| f(x, s)).collect()
        } else if av.is_scalar() {
            let s = av.item();
            bv.data().iter().map(|&y| f(s, y)).collect()
        } else {
            return Err(Error::dim(name, av.shape(), bv.shape()));
        };
        let shape = if av.is_scalar() && !bv.is_scalar() {
            bv.shape().to_vec()
        } else {
            av.shape().to_vec()
        };
        Tensor::new(&shape, data)
    }

    /// Element-wise sum; one side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Element-wise product; one side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(a).map(|x| x * c);
        let needs = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.dims2()?;
        if bv.len() != n {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::new(xv.shape(), data)?;
        let needs = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(relu);
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), needs)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{op:?} takes {arity} input(s), got {}",
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::Relu => Ok(self.relu(inputs[0])),
            ElementwiseOp::Gelu => Ok(self.gelu(inputs[0])),
            ElementwiseOp::Scale(c) => Ok(self.scale(inputs[0], c)),
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = axis_extents(xv.shape(), axis)?;
        let value = Tensor::new(xv.shape(), softmax_kernel(xv.data(), outer, n, inner))?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layernorm", xv.shape(), gv.shape()))?;
        if gv.len() != d || bv.len() != d {
            return Err(Error::dim("layernorm", xv.shape(), gv.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layernorm eps must be positive"));
        }
        let (out, cache) = layernorm_kernel(xv.data(), gv.data(), bv.data(), d, T::lit(eps));
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", xv.shape(), &[start, len]));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[m, len], data)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, total], data)?;
        let needs = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let (_, n) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(*first), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, n], data)?;
        let needs = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Column means of an `[m, n]` matrix as a `[1, n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let inv = T::one() / T::lit(m as f64);
        let mut data = vec![T::zero(); n];
        for row in xv.data().chunks(n) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        data.iter_mut().for_each(|d| *d = *d * inv);
        let value = Tensor::new(&[1, n], data)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanRows(x), needs))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if row >= m {
            return Err(Error::Range {
                what: "row",
                index: row,
                len: m,
            });
        }
        let value = Tensor::new(&[1, n], xv.row(row).to_vec())?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::SelectRow { x, row }, needs))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Scales each row to unit L2 norm. A row with norm below
    /// [`NORM_FLOOR`] is a contract error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims2()?;
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(xv.len());
        for (r, row) in xv.data().chunks(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm.as_f64() < NORM_FLOOR {
                return Err(Error::contract(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(xv.shape(), data)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, needs))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against
    /// integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2()?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Range {
                what: "target class",
                index: t,
                len: c,
            });
        }
        let probs = softmax_kernel(lv.data(), b, c, 1);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[t]);
        }
        let value = Tensor::scalar(loss / T::lit(b as f64));
        let needs = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Gradient for a broadcast operand: summed when it was a scalar.
    fn reduce_to(&self, v: Var, g: Vec<T>) -> Vec<T> {
        if self.value(v).len() == g.len() {
            g
        } else {
            vec![g.into_iter().sum()]
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs_grad(*a) {
                    let bt = transpose_kernel(bv.data(), k, n);
                    self.acc(grads, *a, matmul_kernel(g, &bt, m, n, k));
                }
                if self.needs_grad(*b) {
                    let at = transpose_kernel(av.data(), m, k);
                    self.acc(grads, *b, matmul_kernel(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs_grad(v) {
                        let contrib = self.reduce_to(v, g.to_vec());
                        self.acc(grads, v, contrib);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs_grad(v) {
                        continue;
                    }
                    let ov = self.value(other);
                    let full: Vec<T> = if ov.len() == g.len() {
                        g.iter().zip(ov.data()).map(|(&gg, &o)| gg * o).collect()
                    } else {
                        let o = ov.item();
                        g.iter().map(|&gg| gg * o).collect()
                    };
                    let contrib = self.reduce_to(v, full);
                    self.acc(grads, v, contrib);
                }
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, g.iter().map(|&gg| gg * *c).collect());
            }
            Op::AddBias(x, b) => {
                if self.needs_grad(*x) {
                    self.acc(grads, *x, g.to_vec());
                }
                if self.needs_grad(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gg, &v)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gg, &v)| gg * gelu_derivative(v))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) =
                    axis_extents(node.value.shape(), *axis).expect("validated on push");
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let dn = T::lit(d as f64);
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<T> =
                            g[span.clone()].iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let xh = &xhat[span.clone()];
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs_grad(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * xrow[j];
                        }
                    }
                    self.acc(grads, *gamma, dg);
                }
                if self.needs_grad(*beta) {
                    let mut db = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, &b)| *a = *a + b);
                    }
                    self.acc(grads, *beta, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                self.acc(grads, *x, transpose_kernel(g, r, c));
            }
            Op::SliceCols { x, start } => {
                let xs = self.value(*x).shape();
                let (m, n) = (xs[0], xs[1]);
                let len = node.value.shape()[1];
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs_grad(p) {
                        self.acc(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let xs = self.value(*x).shape();
                let inv = T::one() / T::lit(xs[0] as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let d = (0..xs[0]).flat_map(|_| row.iter().copied()).collect();
                self.acc(grads, *x, d);
            }
            Op::SelectRow { x, row } => {
                let xs = self.value(*x).shape();
                let n = xs[1];
                let mut d = vec![T::zero(); xs[0] * n];
                d[row * n..(row + 1) * n].copy_from_slice(g);
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let mut d = vec![T::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let yr = &y[span.clone()];
                    let gr = &g[span];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..n {
                        d[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let scale = g[0] / T::lit(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] = d[r * c + t] - scale;
                }
                self.acc(grads, *logits, d);
            }
        }
    }
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when nothing trainable flowed through it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad` when one exists.
    pub fn write_into(&self, v: Var, t: &mut Tensor<T>) -> Result<bool> {
        match self.get(v) {
            Some(g) => {
                t.set_grad(g.to_vec())?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

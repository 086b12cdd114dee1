use std::collections::BTreeMap;

use super::tensor::gemm;
use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    RowSoftmax(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Broadcast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Leaf registered as a differentiation variable.
    variable: bool,
    /// Reachable from some variable; backward skips nodes without it.
    needs_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in evaluation order, so every parent precedes its
/// consumers and the reverse sweep in [`Tape::backward`] is a plain
/// reverse iteration.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every variable on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for `var`. Panics if `var` was not registered as a variable.
    pub fn get(&self, var: Var) -> &Tensor {
        self.grads
            .get(&var)
            .unwrap_or_else(|| panic!("no gradient recorded for {var:?}"))
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiation variable (parameter or input of interest).
    pub fn variable(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            variable: true,
            needs_grad: true,
        });
        Var(id)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            variable: false,
            needs_grad,
        });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Log(a), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Sqrt(a), ng))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Sum over rows (`axis = 0`, giving `1 x c`) or columns (`axis = 1`,
    /// giving `r x 1`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let v = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(t.row(i)) {
                        *o += x;
                    }
                }
                Tensor::matrix(1, c, out)
            }
            1 => Tensor::matrix(r, 1, (0..r).map(|i| t.row(i).iter().sum()).collect()),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "sum_axis",
                    detail: format!("axis {axis} on rank-2 view"),
                })
            }
        };
        let ng = self.ng(a);
        Ok(self.push(v, Op::SumAxis(a, axis), ng))
    }

    /// Numerically stable softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|x| x / s));
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(a);
        self.push(v, Op::RowSoftmax(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Concatenate rank-2 views along `axis` (0 = stack rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let (r0, c0) = self.value(first).dims2();
        let v = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != c0 {
                        return Err(mismatch("concat", self.value(first), t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != r0 {
                        return Err(mismatch("concat", self.value(first), t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(r0, cols, data)
            }
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    detail: format!("axis {axis}"),
                })
            }
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Half-open column range `[start, end)` of a rank-2 view.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if start >= end || end > c {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                detail: format!("columns {start}..{end} of shape {:?}", t.shape()),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let v = Tensor::matrix(r, w, data);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Slice(a, start, end), ng))
    }

    /// Broadcast a rank-2 view to `shape` (`[rows, cols]`); source
    /// dimensions must equal the target or be 1.
    pub fn broadcast(&mut self, a: Var, shape: [usize; 2]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let [tr, tc] = shape;
        if (r != tr && r != 1) || (c != tc && c != 1) || tr == 0 || tc == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(tr * tc);
        for i in 0..tr {
            let si = if r == 1 { 0 } else { i };
            for j in 0..tc {
                let sj = if c == 1 { 0 } else { j };
                data.push(t.data()[si * c + sj]);
            }
        }
        let v = Tensor::matrix(tr, tc, data);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Broadcast(a), ng))
    }

    /// Broadcast whichever operand is smaller, then add.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = self.align(a, b)?;
        self.add(a, b)
    }

    /// Broadcast whichever operand is smaller, then multiply.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = self.align(a, b)?;
        self.mul(a, b)
    }

    fn align(&mut self, a: Var, b: Var) -> Result<(Var, Var), TensorError> {
        if self.shape(a) == self.shape(b) {
            return Ok((a, b));
        }
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        let target = [ra.max(rb), ca.max(cb)];
        let a2 = if [ra, ca] == target && self.shape(a).len() == 2 {
            a
        } else {
            self.broadcast(a, target)?
        };
        let b2 = if [rb, cb] == target && self.shape(b).len() == 2 {
            b
        } else {
            self.broadcast(b, target)?
        };
        Ok((a2, b2))
    }

    /// Reverse sweep from a scalar `loss`. Every variable on the tape gets an
    /// entry; variables the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]).expect("scalar"));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || node.variable {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.variable {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(Var(id), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(if g.shape() == shape.as_slice() {
                    g
                } else {
                    g.reshape(shape).expect("gradient size matches value")
                });
            }
        }
    }

    /// Accumulator for `v`, zero-initialised on first use; `None` when `v`
    /// needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) && self.ng(*b) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g);
                } else {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                let mut neg = g;
                neg.data_mut().iter_mut().for_each(|x| *x = -*x);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(tb, |gi, bi| gi * bi));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(ta, |gi, ai| gi * ai));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(tb, |gi, bi| gi / bi));
                }
                if self.ng(*b) {
                    let mut gb = g.zip_map(ta, |gi, ai| -gi * ai);
                    for (x, bi) in gb.data_mut().iter_mut().zip(tb.data()) {
                        *x /= bi * bi;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb));
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)))
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gi, xi| gi / xi))
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gi, xi| gi * sign(xi)))
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gi, xi| 2.0 * gi * xi))
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| 0.5 * gi / yi)),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 }),
                )
            }
            Op::Sum(a) => {
                let gi = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gi));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gi = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gi));
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.value(*a).dims2();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, out));
            }
            Op::RowSoftmax(a) => {
                // y * (g - <g, y>) per row, without forming the Jacobian.
                let (r, c) = y.dims2();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, out).expect("shape"));
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.accumulate(grads, *a, gt);
            }
            Op::Concat(parts, axis) => {
                let (_, gc) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2();
                    if self.ng(p) {
                        let part = if *axis == 0 {
                            g.data()[offset * gc..(offset + pr) * gc].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                d.extend_from_slice(&g.data()[i * gc + offset..i * gc + offset + pc]);
                            }
                            d
                        };
                        self.accumulate(grads, p, Tensor::matrix(pr, pc, part));
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice(a, start, end) => {
                let w = end - start;
                if let Some(acc) = self.slot(grads, *a) {
                    let c = acc.cols();
                    let data = acc.data_mut();
                    for (i, gr) in g.data().chunks_exact(w).enumerate() {
                        for (o, x) in data[i * c + start..i * c + end].iter_mut().zip(gr) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Broadcast(a) => {
                let (tr, tc) = g.dims2();
                if let Some(acc) = self.slot(grads, *a) {
                    let (r, c) = acc.dims2();
                    let out = acc.data_mut();
                    for i in 0..tr {
                        let si = if r == 1 { 0 } else { i };
                        for j in 0..tc {
                            let sj = if c == 1 { 0 } else { j };
                            out[si * c + sj] += g.data()[i * tc + j];
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

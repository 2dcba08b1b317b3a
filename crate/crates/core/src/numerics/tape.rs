//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its value and enough context to run its backward rule. Inputs
//! always precede outputs, so a single reverse sweep over the node list is a
//! valid topological traversal.
//!
//! Shape rules (every tensor viewed as a matrix, see [`Tensor`]):
//!
//! * `matmul`: `[r,k] x [k,c] -> [r,c]`.
//! * `add`, `sub`, `mul`, `div`: per-dimension broadcasting; each dimension
//!   of each operand must equal the output dimension or be 1. The output rank
//!   is the larger input rank.
//! * `sum`, `mean`, `std`: reduce all elements (rank-0 result), each row
//!   (`[r,1]`), or each column (`[1,c]`).
//! * `softmax`: along each row.
//! * `concat_cols`: all inputs share the row count.
//! * `slice_cols`, `select_rows`, `gather_cols`, `scatter_cols`: index ops;
//!   indices are constants and are not differentiated.
//! * `moving_average`: along each row with odd window and edge replication.

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction scope for `sum`, `mean` and `std`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    All,
    /// One value per row, shape `[r,1]`.
    PerRow,
    /// One value per column, shape `[1,c]`.
    PerCol,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Sum(Var, Reduce),
    Mean(Var, Reduce),
    Std(Var, Reduce),
    Softmax(Var),
    Concat(Vec<Var>),
    Relu(Var),
    Log(Var),
    Exp(Var),
    MaxScalar(Var, f64),
    Square(Var),
    Sqrt(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    GatherCols(Var, Vec<Vec<usize>>),
    ScatterCols(Var, Vec<Vec<usize>>),
    MovingAverage(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if `v` does not depend on any
    /// differentiable leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Broadcast output dims for two operands, or `None` if incompatible.
fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn broadcast_shape(out: (usize, usize), rank: usize) -> Vec<usize> {
    match rank {
        0 => Vec::new(),
        1 => vec![out.1],
        _ => vec![out.0, out.1],
    }
}

#[inline]
fn bidx(dims: (usize, usize), i: usize, j: usize) -> usize {
    let r = if dims.0 == 1 { 0 } else { i };
    let c = if dims.1 == 1 { 0 } else { j };
    r * dims.1 + c
}

/// Sum a gradient of shape `out` down to operand shape `dims`.
fn unbroadcast(g: &[f64], out: (usize, usize), dims: (usize, usize)) -> Vec<f64> {
    if out == dims {
        return g.to_vec();
    }
    let mut acc = vec![0.0; dims.0 * dims.1];
    for i in 0..out.0 {
        for j in 0..out.1 {
            acc[bidx(dims, i, j)] += g[i * out.1 + j];
        }
    }
    acc
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push_node(t, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(value, op, requires_grad))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(vs) => vs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Neg(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Std(a, _)
            | Op::Softmax(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::MaxScalar(a, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _)
            | Op::GatherCols(a, _)
            | Op::ScatterCols(a, _)
            | Op::MovingAverage(a, _) => vec![*a],
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let out = matmul_raw(self.data(a), self.data(b), r, k, c);
        self.push("matmul", vec![r, c], out, Op::MatMul(a, b))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let out = broadcast_dims(da, db).ok_or_else(|| shape_err(name, &[self.shape(a), self.shape(b)]))?;
        let rank = self.shape(a).len().max(self.shape(b).len());
        let (xa, xb) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(out.0 * out.1);
        for i in 0..out.0 {
            for j in 0..out.1 {
                data.push(f(xa[bidx(da, i, j)], xb[bidx(db, i, j)]));
            }
        }
        self.push(name, broadcast_shape(out, rank), data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("div_scalar", a, |x| x / s, Op::Scale(a, 1.0 / s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn max_with_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("max_with_scalar", a, |x| x.max(s), Op::MaxScalar(a, s))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    fn reduce_shape(&self, a: Var, how: Reduce) -> Vec<usize> {
        let (r, c) = self.dims(a);
        match how {
            Reduce::All => Vec::new(),
            Reduce::PerRow => vec![r, 1],
            Reduce::PerCol => vec![1, c],
        }
    }

    fn reduce_sum(&self, a: Var, how: Reduce) -> Vec<f64> {
        let (r, c) = self.dims(a);
        let x = self.data(a);
        match how {
            Reduce::All => vec![x.iter().sum()],
            Reduce::PerRow => x.chunks(c.max(1)).take(r).map(|row| row.iter().sum()).collect(),
            Reduce::PerCol => {
                let mut out = vec![0.0; c];
                for row in x.chunks(c.max(1)) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
        }
    }

    fn reduce_count(&self, a: Var, how: Reduce) -> usize {
        let (r, c) = self.dims(a);
        match how {
            Reduce::All => r * c,
            Reduce::PerRow => c,
            Reduce::PerCol => r,
        }
    }

    pub fn sum(&mut self, a: Var, how: Reduce) -> Result<Var> {
        let data = self.reduce_sum(a, how);
        let shape = self.reduce_shape(a, how);
        self.push("sum", shape, data, Op::Sum(a, how))
    }

    pub fn mean(&mut self, a: Var, how: Reduce) -> Result<Var> {
        let n = self.reduce_count(a, how);
        if n == 0 {
            return Err(shape_err("mean", &[self.shape(a)]));
        }
        let data = self.reduce_sum(a, how).into_iter().map(|s| s / n as f64).collect();
        let shape = self.reduce_shape(a, how);
        self.push("mean", shape, data, Op::Mean(a, how))
    }

    /// Population standard deviation (divisor `n`).
    pub fn std(&mut self, a: Var, how: Reduce) -> Result<Var> {
        let n = self.reduce_count(a, how);
        if n == 0 {
            return Err(shape_err("std", &[self.shape(a)]));
        }
        let means = self.reduce_sum(a, how);
        let (r, c) = self.dims(a);
        let x = self.data(a);
        let mut acc = vec![0.0; means.len()];
        for i in 0..r {
            for j in 0..c {
                let k = reduce_slot(how, i, j);
                let d = x[i * c + j] - means[k] / n as f64;
                acc[k] += d * d;
            }
        }
        let data = acc.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        let shape = self.reduce_shape(a, how);
        self.push("std", shape, data, Op::Std(a, how))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims(a);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, data, Op::Softmax(a))
    }

    /// Concatenates along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.dims(p).0 != rows) {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat", &shapes));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        self.push("concat", vec![rows, total], data, Op::Concat(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(a))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(shape_err("slice", &[self.shape(a), &[start, end]]));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        self.push("slice", vec![r, end - start], data, Op::SliceCols(a, start))
    }

    /// Rows of `a` in the given order (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if rows.iter().any(|&i| i >= r) {
            return Err(shape_err("select_rows", &[self.shape(a), rows]));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        self.push("select_rows", vec![rows.len(), c], data, Op::SelectRows(a, rows.to_vec()))
    }

    /// `out[i][k] = a[i][idx[i][k]]`; every row of `idx` has the same length.
    pub fn gather_cols(&mut self, a: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.dims(a);
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != r || idx.iter().any(|row| row.len() != k || row.iter().any(|&j| j >= c)) {
            return Err(shape_err("gather_cols", &[self.shape(a), &[idx.len(), k]]));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(r * k);
        for (i, row) in idx.iter().enumerate() {
            data.extend(row.iter().map(|&j| x[i * c + j]));
        }
        self.push("gather_cols", vec![r, k], data, Op::GatherCols(a, idx.to_vec()))
    }

    /// Inverse of `gather_cols`: places `a[i][k]` at column `idx[i][k]` of a
    /// zero `[r, width]` matrix. Indices within a row must be distinct.
    pub fn scatter_cols(&mut self, a: Var, idx: &[Vec<usize>], width: usize) -> Result<Var> {
        let (r, k) = self.dims(a);
        if idx.len() != r || idx.iter().any(|row| row.len() != k || row.iter().any(|&j| j >= width)) {
            return Err(shape_err("scatter_cols", &[self.shape(a), &[idx.len(), width]]));
        }
        let x = self.data(a);
        let mut data = vec![0.0; r * width];
        for (i, row) in idx.iter().enumerate() {
            for (p, &j) in row.iter().enumerate() {
                data[i * width + j] = x[i * k + p];
            }
        }
        self.push("scatter_cols", vec![r, width], data, Op::ScatterCols(a, idx.to_vec()))
    }

    /// Centered moving average along each row; `window` must be odd. Edges are
    /// padded by repeating the first/last value.
    pub fn moving_average(&mut self, a: Var, window: usize) -> Result<Var> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(shape_err("moving_average", &[self.shape(a), &[window]]));
        }
        let (_, c) = self.dims(a);
        let half = (window / 2) as isize;
        let mut data = Vec::with_capacity(self.data(a).len());
        for row in self.data(a).chunks(c.max(1)) {
            for j in 0..c as isize {
                let s: f64 = (-half..=half).map(|o| row[(j + o).clamp(0, c as isize - 1) as usize]).sum();
                data.push(s / window as f64);
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("moving_average", shape, data, Op::MovingAverage(a, window))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", &[self.shape(loss)]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.dims();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.dims(*a);
                let c = out.1;
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let ga = matmul_bt_raw(g, self.data(*b), r, c, k);
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let gb = matmul_at_raw(self.data(*a), g, r, k, c);
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    self.send(grads, *a, unbroadcast(g, out, self.dims(*a)));
                }
                if self.requires_grad(*b) {
                    let mut gb = unbroadcast(g, out, self.dims(*b));
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (xa, xb) = (self.data(*a), self.data(*b));
                let n = out.0 * out.1;
                if self.requires_grad(*a) {
                    let mut full = Vec::with_capacity(n);
                    for i in 0..out.0 {
                        for j in 0..out.1 {
                            let bv = xb[bidx(db, i, j)];
                            let gv = g[i * out.1 + j];
                            full.push(if is_div { gv / bv } else { gv * bv });
                        }
                    }
                    self.send(grads, *a, unbroadcast(&full, out, da));
                }
                if self.requires_grad(*b) {
                    let mut full = Vec::with_capacity(n);
                    for i in 0..out.0 {
                        for j in 0..out.1 {
                            let av = xa[bidx(da, i, j)];
                            let gv = g[i * out.1 + j];
                            if is_div {
                                let bv = xb[bidx(db, i, j)];
                                full.push(-gv * av / (bv * bv));
                            } else {
                                full.push(gv * av);
                            }
                        }
                    }
                    self.send(grads, *b, unbroadcast(&full, out, db));
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => self.send(grads, *a, g.to_vec()),
            Op::Neg(a) => self.send(grads, *a, g.iter().map(|v| -v).collect()),
            Op::Sum(a, how) | Op::Mean(a, how) => {
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / self.reduce_count(*a, *how) as f64
                } else {
                    1.0
                };
                let (r, c) = self.dims(*a);
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga.push(g[reduce_slot(*how, i, j)] * scale);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Std(a, how) => {
                let n = self.reduce_count(*a, *how) as f64;
                let (r, c) = self.dims(*a);
                let x = self.data(*a);
                let means: Vec<f64> = self.reduce_sum(*a, *how).into_iter().map(|s| s / n).collect();
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let k = reduce_slot(*how, i, j);
                        // d std / dx = (x - mean) / (n * std); zero when std == 0
                        let d = if y[k] > 0.0 { (x[i * c + j] - means[k]) / (n * y[k]) } else { 0.0 };
                        ga.push(g[k] * d);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let c = out.1.max(1);
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    ga.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                self.send(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let total = out.1;
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.send(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                self.send(grads, *a, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::MaxScalar(a, s) => {
                let x = self.data(*a);
                self.send(grads, *a, g.iter().zip(x).map(|(gv, &xv)| if xv > *s { *gv } else { 0.0 }).collect());
            }
            Op::Log(a) => {
                let x = self.data(*a);
                self.send(grads, *a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
            }
            Op::Exp(a) => self.send(grads, *a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()),
            Op::Square(a) => {
                let x = self.data(*a);
                self.send(grads, *a, g.iter().zip(x).map(|(gv, xv)| 2.0 * xv * gv).collect());
            }
            Op::Sqrt(a) => {
                self.send(grads, *a, g.iter().zip(y).map(|(gv, yv)| gv / (2.0 * yv)).collect());
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(matrix_shape(out), g.to_vec()).unwrap().transpose();
                self.send(grads, *a, gt.into_data());
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let w = out.1;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.send(grads, *a, ga);
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = self.dims(*a);
                let mut ga = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = self.dims(*a);
                let k = out.1;
                let mut ga = vec![0.0; r * c];
                for (i, row) in idx.iter().enumerate() {
                    for (p, &j) in row.iter().enumerate() {
                        ga[i * c + j] += g[i * k + p];
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::ScatterCols(a, idx) => {
                let width = out.1;
                let ga = idx
                    .iter()
                    .enumerate()
                    .flat_map(|(i, row)| row.iter().map(move |&j| g[i * width + j]))
                    .collect();
                self.send(grads, *a, ga);
            }
            Op::MovingAverage(a, window) => {
                let c = out.1;
                let half = (*window / 2) as isize;
                let inv = 1.0 / *window as f64;
                let mut ga = vec![0.0; g.len()];
                for (grow, arow) in g.chunks(c.max(1)).zip(ga.chunks_mut(c.max(1))) {
                    for j in 0..c as isize {
                        for o in -half..=half {
                            arow[(j + o).clamp(0, c as isize - 1) as usize] += grow[j as usize] * inv;
                        }
                    }
                }
                self.send(grads, *a, ga);
            }
        }
    }
}

fn reduce_slot(how: Reduce, i: usize, j: usize) -> usize {
    match how {
        Reduce::All => 0,
        Reduce::PerRow => i,
        Reduce::PerCol => j,
    }
}

fn matrix_shape(d: (usize, usize)) -> Vec<usize> {
    vec![d.0, d.1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn param(t: Tensor) -> Tensor {
        t.with_requires_grad(true)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_and_mean() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0; 3]));
        let s = tape.softmax(z).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = tape.mean(x, Reduce::All).unwrap();
        assert_eq!(tape.value(m).item(), 4.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(Tensor::vector(vec![1.0, -2.0, 3.0])));
        let s = tape.sum(x, Reduce::All).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(Tensor::vector(vec![1.0, 2.0])));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq, Reduce::All).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&param(Tensor::vector(vec![1.0, 2.0])));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut tape = Tape::new();
        let a = tape.leaf(&param(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]])));
        let row = tape.leaf(&param(Tensor::vector(vec![10.0, 20.0])));
        let col = tape.leaf(&param(mat(&[vec![2.0], vec![3.0]])));
        let s = tape.add(a, row).unwrap();
        let p = tape.mul(s, col).unwrap();
        assert_eq!(tape.value(p).data(), &[22.0, 44.0, 39.0, 72.0]);
        let l = tape.sum(p, Reduce::All).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(row).unwrap(), &[5.0, 5.0]);
        assert_eq!(g.get(col).unwrap(), &[33.0, 37.0]);
        assert_eq!(g.get(a).unwrap(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(&param(Tensor::vector(vec![3.0, 4.0])));
        let p = tape.mul(c, x).unwrap();
        let l = tape.sum(p, Reduce::All).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_output_is_an_error_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn moving_average_replicates_edges() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 3.0, 6.0]));
        let m = tape.moving_average(x, 3).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 3.0, 5.0]);
        assert!(tape.moving_average(x, 2).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let idx = vec![vec![2, 0], vec![1, 2]];
        let g = tape.gather_cols(a, &idx).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 1.0, 5.0, 6.0]);
        let s = tape.scatter_cols(g, &idx, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 3.0, 0.0, 5.0, 6.0]);
    }
}

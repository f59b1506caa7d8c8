//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse,
//! visiting each node once and accumulating gradients additively into its
//! inputs.
//!
//! ```
//! use velc_core::diff::Graph;
//! use velc_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```
//!
//! A graph is meant to live for a single forward/backward pass; build a fresh
//! one per training step.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, VelcError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    L1Norm,
    L2Norm,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Reduce(Reduce, Var, Option<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    NormalizeRows(Var),
    Threshold(Var, f64),
    /// `(pre, c_prev, [f | i | g] activations)`.
    CellState(Var, Var, Tensor),
    /// `(pre, c, [o | tanh(c)])`.
    CellOutput(Var, Var, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Binary(..) => "binary",
            Op::AddRow(..) => "add_row",
            Op::Unary(..) => "unary",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::Reduce(..) => "reduce",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Threshold(..) => "threshold",
            Op::CellState(..) => "cell_state",
            Op::CellOutput(..) => "cell_output",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(VelcError::Domain {
                op: op.name(),
                detail: "non-finite result".into(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Input, t, false)
    }

    /// Differentiable input whose gradient can be read back with [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t, true)
    }

    /// Node for a stored parameter. Repeated calls return the same node so
    /// that gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_unchecked(Op::Param, store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(VelcError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.requires(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => x.zip_map(y, |p, q| p + q),
            Binary::Sub => x.zip_map(y, |p, q| p - q),
            Binary::Mul => x.zip_map(y, |p, q| p * q),
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Binary(kind, a, b), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `a[m×n] + bias[1×n]`, the bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let b = self.value(bias);
        if x.rank() != 2 || b.shape() != [1, x.cols()] {
            return Err(VelcError::Shape {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let n = x.cols();
        let mut value = x.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        self.push(Op::AddRow(a, bias), value, rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(VelcError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Unary::Square => x.map(|v| v * v),
            Unary::Abs => x.map(f64::abs),
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|v| **v < 0.0) {
                    return Err(VelcError::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                x.map(f64::sqrt)
            }
        };
        let rg = self.requires(a);
        self.push(Op::Unary(kind, a), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.requires(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        let rg = self.requires(a);
        self.push(Op::AddScalar(a), value, rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.requires(a);
        self.push(Op::Clamp(a, lo, hi), value, rg)
    }

    /// Reduction over one axis (kept with size 1) or over everything (result
    /// has the input's rank with every dimension 1).
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = reduce_layout(x.shape(), axis)?;
        let out_shape = reduced_shape(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|l| x.data()[(o * len + l) * inner + i]);
                out[o * inner + i] = match kind {
                    Reduce::Sum => lane.sum(),
                    Reduce::Mean => lane.sum::<f64>() / len as f64,
                    Reduce::L1Norm => lane.map(f64::abs).sum(),
                    Reduce::L2Norm => lane.map(|v| v * v).sum::<f64>().sqrt(),
                };
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires(a);
        self.push(Op::Reduce(kind, a, axis), value, rg)
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, a, axis)
    }

    pub fn l1_norm(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::L1Norm, a, axis)
    }

    pub fn l2_norm(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::L2Norm, a, axis)
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(VelcError::Empty("concat_cols with no inputs".into()));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(VelcError::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start >= end || end > x.cols() {
            return Err(VelcError::Shape {
                op: "slice_cols",
                left: x.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, data)?;
        let rg = self.requires(a);
        self.push(Op::SliceCols(a, start), value, rg)
    }

    /// Scales each row of a rank-2 tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.require_rank2("normalize_rows")?;
        let mut value = x.clone();
        let n = x.cols();
        for (r, row) in value.data_mut().chunks_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(VelcError::Degenerate {
                    op: "normalize_rows",
                    detail: format!("row {r} has norm {norm}"),
                });
            }
            for v in row {
                *v /= norm;
            }
        }
        let rg = self.requires(a);
        self.push(Op::NormalizeRows(a), value, rg)
    }

    /// Keeps entries strictly greater than `ths`, zeroes the rest.
    pub fn threshold(&mut self, a: Var, ths: f64) -> Result<Var> {
        let value = self.value(a).map(|v| if v > ths { v } else { 0.0 });
        let rg = self.requires(a);
        self.push(Op::Threshold(a, ths), value, rg)
    }

    fn check_cell(&self, op: &'static str, pre: Var, other: Var) -> Result<usize> {
        let (p, o) = (self.value(pre), self.value(other));
        p.require_rank2(op)?;
        o.require_rank2(op)?;
        let h = o.cols();
        if p.rows() != o.rows() || p.cols() != 4 * h {
            return Err(VelcError::Shape {
                op,
                left: p.shape().to_vec(),
                right: o.shape().to_vec(),
            });
        }
        Ok(h)
    }

    /// LSTM cell state `c = σ(pre_f)⊙c_prev + σ(pre_i)⊙tanh(pre_g)` where
    /// `pre = [pre_f | pre_i | pre_g | pre_o]` is `[B × 4H]` and `c_prev` is
    /// `[B × H]`.
    pub fn cell_state(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let h = self.check_cell("cell_state", pre, c_prev)?;
        let (p, cp) = (self.value(pre), self.value(c_prev));
        let rows = p.rows();
        let mut gates = vec![0.0; rows * 3 * h];
        let mut c = vec![0.0; rows * h];
        for r in 0..rows {
            let pr = p.row(r);
            let gr = &mut gates[r * 3 * h..(r + 1) * 3 * h];
            let cr = &mut c[r * h..(r + 1) * h];
            let cpr = cp.row(r);
            for j in 0..h {
                let f = sigmoid(pr[j]);
                let i = sigmoid(pr[h + j]);
                let g = pr[2 * h + j].tanh();
                gr[j] = f;
                gr[h + j] = i;
                gr[2 * h + j] = g;
                cr[j] = f * cpr[j] + i * g;
            }
        }
        let value = Tensor::matrix(rows, h, c)?;
        let gates = Tensor::matrix(rows, 3 * h, gates)?;
        let rg = self.requires(pre) || self.requires(c_prev);
        self.push(Op::CellState(pre, c_prev, gates), value, rg)
    }

    /// LSTM hidden output `h = σ(pre_o)⊙tanh(c)`.
    pub fn cell_output(&mut self, pre: Var, c: Var) -> Result<Var> {
        let h = self.check_cell("cell_output", pre, c)?;
        let (p, cv) = (self.value(pre), self.value(c));
        let rows = p.rows();
        let mut cache = vec![0.0; rows * 2 * h];
        let mut out = vec![0.0; rows * h];
        for r in 0..rows {
            let pr = p.row(r);
            let cr = cv.row(r);
            let kr = &mut cache[r * 2 * h..(r + 1) * 2 * h];
            let or = &mut out[r * h..(r + 1) * h];
            for j in 0..h {
                let o = sigmoid(pr[3 * h + j]);
                let tc = cr[j].tanh();
                kr[j] = o;
                kr[h + j] = tc;
                or[j] = o * tc;
            }
        }
        let value = Tensor::matrix(rows, h, out)?;
        let cache = Tensor::matrix(rows, 2 * h, cache)?;
        let rg = self.requires(pre) || self.requires(c);
        self.push(Op::CellOutput(pre, c, cache), value, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(VelcError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let g = if keep {
                match &grads[idx] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(node, &g, &mut grads);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let b_val = self.value(*b);
                    gemm(g, false, b_val, true, self.slot(grads, *a), 1.0);
                }
                if self.requires(*b) {
                    let a_val = self.value(*a);
                    gemm(a_val, true, g, false, self.slot(grads, *b), 1.0);
                }
            }
            Op::Transpose(a) => {
                if self.requires(*a) {
                    let t = g.transpose().expect("rank-2 gradient");
                    self.accumulate(grads, *a, t);
                }
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    Binary::Add => {
                        if self.requires(a) {
                            self.accumulate(grads, a, g.clone());
                        }
                        if self.requires(b) {
                            self.accumulate(grads, b, g.clone());
                        }
                    }
                    Binary::Sub => {
                        if self.requires(a) {
                            self.accumulate(grads, a, g.clone());
                        }
                        if self.requires(b) {
                            self.accumulate(grads, b, g.map(|v| -v));
                        }
                    }
                    Binary::Mul => {
                        if self.requires(a) {
                            let t = g.zip_map(self.value(b), |gv, bv| gv * bv);
                            self.accumulate(grads, a, t);
                        }
                        if self.requires(b) {
                            let t = g.zip_map(self.value(a), |gv, av| gv * av);
                            self.accumulate(grads, b, t);
                        }
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires(*bias) {
                    let n = g.cols();
                    let slot = self.slot(grads, *bias);
                    for row in g.data().chunks(n) {
                        for (s, v) in slot.data_mut().iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                if !self.requires(*a) {
                    return;
                }
                let x = self.value(*a);
                let t = match kind {
                    Unary::Sigmoid => g.zip_map(out, |gv, y| gv * y * (1.0 - y)),
                    Unary::Tanh => g.zip_map(out, |gv, y| gv * (1.0 - y * y)),
                    Unary::Exp => g.zip_map(out, |gv, y| gv * y),
                    Unary::Log => g.zip_map(x, |gv, xv| gv / xv),
                    Unary::Square => g.zip_map(x, |gv, xv| 2.0 * xv * gv),
                    Unary::Abs => g.zip_map(x, |gv, xv| gv * sign(xv)),
                    Unary::Sqrt => g.zip_map(out, |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 }),
                };
                self.accumulate(grads, *a, t);
            }
            Op::Scale(a, factor) => {
                if self.requires(*a) {
                    let f = *factor;
                    self.accumulate(grads, *a, g.map(|v| v * f));
                }
            }
            Op::AddScalar(a) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.requires(*a) {
                    let (lo, hi) = (*lo, *hi);
                    let t = g.zip_map(self.value(*a), |gv, xv| {
                        if (lo..=hi).contains(&xv) {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(grads, *a, t);
                }
            }
            Op::Reduce(kind, a, axis) => {
                if !self.requires(*a) {
                    return;
                }
                let x = self.value(*a);
                let (outer, len, inner) =
                    reduce_layout(x.shape(), *axis).expect("validated at forward");
                let mut t = Tensor::zeros(x.shape());
                let xd = x.data();
                let td = t.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g.data()[o * inner + i];
                        let r = out.data()[o * inner + i];
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            td[k] = match kind {
                                Reduce::Sum => gv,
                                Reduce::Mean => gv / len as f64,
                                Reduce::L1Norm => gv * sign(xd[k]),
                                Reduce::L2Norm => {
                                    if r > 0.0 {
                                        gv * xd[k] / r
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires(p) {
                        let slot = self.slot(grads, p);
                        for r in 0..rows {
                            let src = &g.row(r)[offset..offset + w];
                            for (s, v) in slot.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *s += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires(*a) {
                    let start = *start;
                    let w = g.cols();
                    let n = self.value(*a).cols();
                    let slot = self.slot(grads, *a);
                    for r in 0..g.rows() {
                        let dst = &mut slot.data_mut()[r * n + start..r * n + start + w];
                        for (s, v) in dst.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if !self.requires(*a) {
                    return;
                }
                let x = self.value(*a);
                let n = x.cols();
                let mut t = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let yr = out.row(r);
                    let gr = g.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for (j, dst) in t.data_mut()[r * n..(r + 1) * n].iter_mut().enumerate() {
                        *dst = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::Threshold(a, ths) => {
                if self.requires(*a) {
                    let ths = *ths;
                    let t = g.zip_map(self.value(*a), |gv, xv| if xv > ths { gv } else { 0.0 });
                    self.accumulate(grads, *a, t);
                }
            }
            Op::CellState(pre, c_prev, gates) => {
                let h = g.cols();
                let rows = g.rows();
                if self.requires(*pre) {
                    let cp = self.value(*c_prev);
                    let slot = self.slot(grads, *pre);
                    let d = slot.data_mut();
                    for r in 0..rows {
                        let (gr, dc, cpr) = (gates.row(r), g.row(r), cp.row(r));
                        let dr = &mut d[r * 4 * h..r * 4 * h + 3 * h];
                        for j in 0..h {
                            let (f, i, gg) = (gr[j], gr[h + j], gr[2 * h + j]);
                            dr[j] += dc[j] * cpr[j] * f * (1.0 - f);
                            dr[h + j] += dc[j] * gg * i * (1.0 - i);
                            dr[2 * h + j] += dc[j] * i * (1.0 - gg * gg);
                        }
                    }
                }
                if self.requires(*c_prev) {
                    let mut t = g.clone();
                    for r in 0..rows {
                        let gr = gates.row(r);
                        for (j, v) in t.data_mut()[r * h..(r + 1) * h].iter_mut().enumerate() {
                            *v *= gr[j];
                        }
                    }
                    self.accumulate(grads, *c_prev, t);
                }
            }
            Op::CellOutput(pre, c, cache) => {
                let h = g.cols();
                let rows = g.rows();
                if self.requires(*pre) {
                    let slot = self.slot(grads, *pre);
                    let d = slot.data_mut();
                    for r in 0..rows {
                        let (kr, dh) = (cache.row(r), g.row(r));
                        let dr = &mut d[r * 4 * h + 3 * h..(r + 1) * 4 * h];
                        for j in 0..h {
                            let (o, tc) = (kr[j], kr[h + j]);
                            dr[j] += dh[j] * tc * o * (1.0 - o);
                        }
                    }
                }
                if self.requires(*c) {
                    let mut t = g.clone();
                    for r in 0..rows {
                        let kr = cache.row(r);
                        for (j, v) in t.data_mut()[r * h..(r + 1) * h].iter_mut().enumerate() {
                            let (o, tc) = (kr[j], kr[h + j]);
                            *v *= o * (1.0 - tc * tc);
                        }
                    }
                    self.accumulate(grads, *c, t);
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reduce_layout(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1)),
        Some(ax) if ax < shape.len() => Ok((
            shape[..ax].iter().product(),
            shape[ax],
            shape[ax + 1..].iter().product(),
        )),
        Some(ax) => Err(VelcError::Contract(format!(
            "invalid reduction axis {ax} for shape {shape:?}"
        ))),
    }
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1; shape.len()],
        Some(ax) => {
            let mut s = shape.to_vec();
            s[ax] = 1;
            s
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf (or any node kept after the sweep).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    pub fn into_param_map(mut self) -> GradientMap {
        let mut map = BTreeMap::new();
        for (id, v) in self.params {
            if let Some(t) = self.grads[v.0].take() {
                map.insert(id, t);
            }
        }
        GradientMap(map)
    }
}

/// Parameter gradients keyed by [`ParamId`]; parameters that never took part
/// in the loss read as zero.
#[derive(Debug, Clone, Default)]
pub struct GradientMap(BTreeMap<ParamId, Tensor>);

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.0
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Tensor)> {
        self.0.iter_mut()
    }

    /// Global Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so that their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let f = max_norm / norm;
            for t in self.0.values_mut() {
                t.scale_in_place(f);
            }
        }
        norm
    }

    pub fn add_assign(&mut self, other: &GradientMap) {
        for (id, t) in &other.0 {
            match self.0.get_mut(id) {
                Some(e) => e.add_assign(t),
                None => {
                    self.0.insert(*id, t.clone());
                }
            }
        }
    }
}

/// Relative discrepancy used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar function of one tensor with
/// central differences of step `h`, returning the largest relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Worst coordinate found by [`finite_diff_check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    Ok(g.value(y).item())
}

/// Fourth-order central-difference check of every parameter entry in
/// `store` for a scalar loss built by `f`. `f` must be deterministic (re-seed any randomness).
pub fn finite_diff_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    let grads = g.backward(y)?.into_param_map();

    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut scratch = store.clone();
    for id in store.ids() {
        let analytic = grads.get_or_zeros(store, id);
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                scratch.get_mut(id).data_mut()[i] = orig + offset;
                eval_scalar(&f, &scratch)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            scratch.get_mut(id).data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            if err > report.max_rel_error {
                report = ParamCheck {
                    max_rel_error: err,
                    worst_param: store.name(id).to_string(),
                    worst_index: i,
                    analytic: analytic.data()[i],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.input(Tensor::identity(2));
        let m = g.input(mat(2, 2, &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let z = g.input(Tensor::zeros(&[2, 3]));
        let any = g.input(mat(3, 2, &[1., -2., 3.5, 4., 5., 6.]));
        let p = g.matmul(z, any).unwrap();
        assert_eq!(g.value(p), &Tensor::zeros(&[2, 2]));

        let a = g.input(mat(2, 2, &[1., 2., 3., 4.]));
        let b = g.input(mat(2, 2, &[5., 6., 7., 8.]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, VelcError::Shape { .. }));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let zero = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(zero).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let t = g.tanh(zero).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let one = g.input(Tensor::scalar(1.0));
        let e = g.exp(one).unwrap();
        assert_eq!(g.value(e).item(), std::f64::consts::E);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(-30.0) - (-30.0f64).exp() / (1.0 + (-30.0f64).exp())).abs() < 1e-25);
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 2]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.add(a, b), Err(VelcError::Shape { .. })));
        let neg = g.input(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(g.log(neg), Err(VelcError::Domain { .. })));
        let zero = g.input(Tensor::vector(vec![0.0]));
        assert!(matches!(g.log(zero), Err(VelcError::Domain { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![3.0, 4.0]));
        let n = g.l2_norm(v, None).unwrap();
        assert_eq!(g.value(n).item(), 5.0);
        let v = g.input(Tensor::vector(vec![-1.0, 2.0]));
        let n = g.l1_norm(v, None).unwrap();
        assert_eq!(g.value(n).item(), 3.0);
        let z = g.input(Tensor::zeros(&[5]));
        let s = g.sum(z, None).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn reduce_along_axes() {
        let mut g = Graph::new();
        let m = g.input(mat(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let rows = g.sum(m, Some(1)).unwrap();
        assert_eq!(g.shape(rows), &[2, 1]);
        assert_eq!(g.value(rows).data(), &[6., 15.]);
        let cols = g.mean(m, Some(0)).unwrap();
        assert_eq!(g.shape(cols), &[1, 3]);
        assert_eq!(g.value(cols).data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(g.sum(m, Some(2)), Err(VelcError::Contract(_))));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let c = g.input(Tensor::scalar(7.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.wrt(x).is_none_or(|t| t.item() == 0.0));

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(VelcError::Contract(_))));
    }

    /// `f = s·s + s` with `s = act(x·w)`, once with `s` shared and once with
    /// three recomputed copies. Returns the gradients wrt `x` and `w`.
    fn shared_vs_expanded(x0: &Tensor, w0: &Tensor, act: Option<Unary>) -> [(Tensor, Tensor); 2] {
        let build = |g: &mut Graph, x: Var, w: Var| {
            let xw = g.matmul(x, w).unwrap();
            match act {
                Some(u) => g.unary(u, xw).unwrap(),
                None => xw,
            }
        };
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let s = build(&mut g, x, w);
        let ss = g.mul(s, s).unwrap();
        let f = g.add(ss, s).unwrap();
        let shared = g.backward(f).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(x0.clone());
        let w2 = g2.leaf(w0.clone());
        let copies: Vec<Var> = (0..3).map(|_| build(&mut g2, x2, w2)).collect();
        let ss = g2.mul(copies[0], copies[1]).unwrap();
        let f2 = g2.add(ss, copies[2]).unwrap();
        let expanded = g2.backward(f2).unwrap();
        [
            (shared.wrt(x).unwrap().clone(), expanded.wrt(x2).unwrap().clone()),
            (shared.wrt(w).unwrap().clone(), expanded.wrt(w2).unwrap().clone()),
        ]
    }

    #[test]
    fn shared_subexpression_matches_expanded_tree() {
        // Dyadic inputs keep every intermediate exact, so the two
        // accumulation orders must agree bit for bit.
        let x0 = mat(1, 3, &[0.5, -0.25, 1.0]);
        let w0 = mat(3, 1, &[0.5, 0.25, -0.5]);
        for (a, b) in shared_vs_expanded(&x0, &w0, None) {
            assert_eq!(a, b);
        }
        // With a transcendental in the chain only the summation order differs.
        let x0 = mat(1, 3, &[0.3, -0.7, 1.1]);
        let w0 = mat(3, 1, &[0.5, 0.25, -0.4]);
        for (a, b) in shared_vs_expanded(&x0, &w0, Some(Unary::Tanh)) {
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!(relative_error(*p, *q) < 1e-14);
            }
        }
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let x = Tensor::vector(vec![0.4, -1.3, 2.2, 0.0]);
        let err = finite_diff_check(
            |g, v| {
                let s = g.square(v)?;
                g.sum(s, None)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let err = finite_diff_check(|g, _| Ok(g.input(Tensor::scalar(2.0))), &x, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    /// `[pre | c_prev]` packed as one `[2 × 5H]` input with `H = 3`.
    fn cell_input() -> Tensor {
        let d: Vec<f64> = (0..30).map(|k| ((k * 7 % 11) as f64 - 5.0) * 0.37).collect();
        mat(2, 15, &d)
    }

    fn cell_via_primitives(g: &mut Graph, pre: Var, c_prev: Var) -> (Var, Var) {
        let f = g.slice_cols(pre, 0, 3).unwrap();
        let f = g.sigmoid(f).unwrap();
        let i = g.slice_cols(pre, 3, 6).unwrap();
        let i = g.sigmoid(i).unwrap();
        let cand = g.slice_cols(pre, 6, 9).unwrap();
        let cand = g.tanh(cand).unwrap();
        let o = g.slice_cols(pre, 9, 12).unwrap();
        let o = g.sigmoid(o).unwrap();
        let keep = g.mul(f, c_prev).unwrap();
        let write = g.mul(i, cand).unwrap();
        let c = g.add(keep, write).unwrap();
        let tc = g.tanh(c).unwrap();
        (g.mul(o, tc).unwrap(), c)
    }

    #[test]
    fn fused_cell_matches_primitive_composition() {
        let x = cell_input();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let pre = g.slice_cols(xv, 0, 12).unwrap();
        let cp = g.slice_cols(xv, 12, 15).unwrap();
        let c = g.cell_state(pre, cp).unwrap();
        let h = g.cell_output(pre, c).unwrap();
        let (h2, c2) = cell_via_primitives(&mut g, pre, cp);
        assert_eq!(g.value(c), g.value(c2));
        assert_eq!(g.value(h), g.value(h2));

        let loss = |g: &mut Graph, h: Var, c: Var| {
            let a = g.sum(h, None).unwrap();
            let cc = g.square(c).unwrap();
            let b = g.sum(cc, None).unwrap();
            g.add(a, b).unwrap()
        };
        let fused = loss(&mut g, h, c);
        let gf = g.backward(fused).unwrap().wrt(xv).unwrap().clone();
        let prim = loss(&mut g, h2, c2);
        let gp = g.backward(prim).unwrap().wrt(xv).unwrap().clone();
        for (a, b) in gf.data().iter().zip(gp.data()) {
            assert!(relative_error(*a, *b) < 1e-13);
        }
    }

    #[test]
    fn fused_cell_finite_differences() {
        let err = finite_diff_check(
            |g, x| {
                let pre = g.slice_cols(x, 0, 12)?;
                let cp = g.slice_cols(x, 12, 15)?;
                let c = g.cell_state(pre, cp)?;
                let h = g.cell_output(pre, c)?;
                let w = g.input(mat(3, 1, &[0.7, -1.1, 0.4]));
                let hw = g.matmul(h, w)?;
                let cw = g.matmul(c, w)?;
                let y = g.mul(hw, cw)?;
                g.sum(y, None)
            },
            &cell_input(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fused_cell_shape_errors() {
        let mut g = Graph::new();
        let pre = g.input(Tensor::zeros(&[2, 8]));
        let c = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cell_state(pre, c), Err(VelcError::Shape { .. })));
        let c = g.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.cell_output(pre, c), Err(VelcError::Shape { .. })));
    }

    #[test]
    fn normalize_rows_rejects_zero_rows() {
        let mut g = Graph::new();
        let z = g.input(mat(2, 2, &[1., 0., 0., 0.]));
        assert!(matches!(g.normalize_rows(z), Err(VelcError::Degenerate { .. })));
    }

    #[test]
    fn clip_preserves_direction() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![3.0, 4.0]));
        let b = store.insert("b", Tensor::vector(vec![12.0]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let bv = g.param(&store, b);
        let s1 = g.square(av).unwrap();
        let s1 = g.sum(s1, None).unwrap();
        let s2 = g.square(bv).unwrap();
        let s2 = g.sum(s2, None).unwrap();
        let tot = g.add(s1, s2).unwrap();
        let tot = g.scale(tot, 0.5).unwrap();
        let mut grads = g.backward(tot).unwrap().into_param_map();
        let before = grads.get(a).unwrap().clone();
        let norm = grads.clip_global_norm(5.0);
        assert_eq!(norm, 13.0);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        let after = grads.get(a).unwrap();
        let ratio = after.data()[0] / before.data()[0];
        assert!((after.data()[1] / before.data()[1] - ratio).abs() < 1e-15);
    }
}

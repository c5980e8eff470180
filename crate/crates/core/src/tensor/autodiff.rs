//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value computed during a forward pass together with
//! the operation that produced it. [`Var`] is a cheap handle into the tape.
//! Calling [`Tape::backward`] on a scalar root walks the tape once in reverse
//! and leaves the adjoint of every gradient-requiring leaf on the tape, after
//! which the tape is consumed.
//!
//! ```
//! use relic_core::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

/// The primitive operations exposed through [`forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    Sub,
    Div,
    Neg,
    Transpose,
    ConcatRows,
    RowSoftmax,
    RowLogSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the operands of an elementwise binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    LhsRow,
    RhsRow,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Self, Vec<usize>)> {
        let numel = |s: &[usize]| s.iter().product::<usize>();
        let is_row_of = |row: &[usize], mat: &[usize]| {
            mat.len() == 2
                && match row {
                    [k] => *k == mat[1],
                    [1, k] => *k == mat[1],
                    _ => false,
                }
        };
        if lhs == rhs {
            Ok((Broadcast::Same, lhs.to_vec()))
        } else if numel(rhs) == 1 {
            Ok((Broadcast::RhsScalar, lhs.to_vec()))
        } else if numel(lhs) == 1 {
            Ok((Broadcast::LhsScalar, rhs.to_vec()))
        } else if is_row_of(rhs, lhs) {
            Ok((Broadcast::RhsRow, lhs.to_vec()))
        } else if is_row_of(lhs, rhs) {
            Ok((Broadcast::LhsRow, rhs.to_vec()))
        } else {
            Err(Error::InvalidShape {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            })
        }
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::RhsScalar => (i, 0),
            Broadcast::LhsScalar => (0, i),
            Broadcast::RhsRow => (i, i % cols),
            Broadcast::LhsRow => (i % cols, i),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize, Broadcast),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Sum(usize, Option<usize>),
    Mean(usize, Option<usize>),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    L2Normalize { input: usize, axis: usize, eps: f64 },
    ClampMin(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward values and the operations linking them.
///
/// Single-threaded by construction; independent tapes may live on different
/// threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    adjoints: RefCell<Vec<Option<Tensor>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf. Leaves with `requires_grad` receive adjoints on backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives an adjoint.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates adjoints from a scalar `root` back to every leaf.
    ///
    /// Leaves that require gradients but do not influence `root` receive a
    /// zero adjoint. The tape can only be differentiated once.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward root belongs to a different tape"));
        }
        if self.consumed.get() {
            return Err(Error::State("tape already consumed by a backward pass".into()));
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {root_shape:?}"
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut adjoints: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    adjoints[id] = Some(Tensor::from_parts(out.shape().to_vec(), g));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[*a].requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; n * k];
                        gemm(n, m, k, &g, m, 1, bv.data(), 1, m, &mut da);
                        acc(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * m];
                        gemm(k, n, m, av.data(), 1, k, &g, m, 1, &mut db);
                        acc(*b, db);
                    }
                }
                Op::Binary(kind, a, b, bc) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let cols = out.cols();
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; av.numel()];
                        for (i, gi) in g.iter().enumerate() {
                            let (li, ri) = bc.index(i, cols);
                            da[li] += match kind {
                                Binary::Add | Binary::Sub => *gi,
                                Binary::Mul => gi * bv.data()[ri],
                                Binary::Div => gi / bv.data()[ri],
                            };
                        }
                        acc(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; bv.numel()];
                        for (i, gi) in g.iter().enumerate() {
                            let (li, ri) = bc.index(i, cols);
                            let r = bv.data()[ri];
                            db[ri] += match kind {
                                Binary::Add => *gi,
                                Binary::Sub => -gi,
                                Binary::Mul => gi * av.data()[li],
                                Binary::Div => -gi * av.data()[li] / (r * r),
                            };
                        }
                        acc(*b, db);
                    }
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Exp(a) => acc(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect()),
                Op::Log(a) => {
                    let x = nodes[*a].value.data();
                    acc(*a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
                }
                Op::Neg(a) => acc(*a, g.iter().map(|v| -v).collect()),
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let input = &nodes[*a].value;
                    let scale = match node.op {
                        Op::Mean(..) => 1.0 / (input.numel() / out.numel()) as f64,
                        _ => 1.0,
                    };
                    let cols = input.cols();
                    let da = (0..input.numel())
                        .map(|i| {
                            let src = match (axis, input.rank()) {
                                (None, _) | (Some(_), 1) => 0,
                                (Some(0), _) => i % cols,
                                _ => i / cols,
                            };
                            g[src] * scale
                        })
                        .collect();
                    acc(*a, da);
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(*a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.numel();
                        acc(p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::RowSoftmax(a) => {
                    let cols = out.cols();
                    let mut da = vec![0.0; g.len()];
                    for ((dx, dy), y) in da
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[j] = y[j] * (dy[j] - dot);
                        }
                    }
                    acc(*a, da);
                }
                Op::RowLogSoftmax(a) => {
                    let cols = out.cols();
                    let mut da = vec![0.0; g.len()];
                    for ((dx, dy), y) in da
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let total: f64 = dy.iter().sum();
                        for j in 0..cols {
                            dx[j] = dy[j] - y[j].exp() * total;
                        }
                    }
                    acc(*a, da);
                }
                Op::L2Normalize { input, axis, eps } => {
                    let x = &nodes[*input].value;
                    let mut da = vec![0.0; x.numel()];
                    for lane in lanes(x.shape(), *axis) {
                        let norm = lane
                            .clone()
                            .map(|i| x.data()[i] * x.data()[i])
                            .sum::<f64>()
                            .sqrt();
                        if norm < *eps {
                            for i in lane {
                                da[i] = g[i];
                            }
                            continue;
                        }
                        let dot: f64 = lane.clone().map(|i| out.data()[i] * g[i]).sum();
                        for i in lane {
                            da[i] = (g[i] - out.data()[i] * dot) / norm;
                        }
                    }
                    acc(*input, da);
                }
                Op::ClampMin(a, floor) => {
                    let x = nodes[*a].value.data();
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gi, &xi)| if xi >= *floor { *gi } else { 0.0 })
                            .collect(),
                    );
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && adjoints[id].is_none() {
                adjoints[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        *self.adjoints.borrow_mut() = adjoints;
        self.consumed.set(true);
        Ok(())
    }
}

/// Index ranges of the 1-D slices of a tensor along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Vec<LaneIter> {
    match (shape.len(), axis) {
        (1, 0) => vec![LaneIter::new(0, 1, shape[0])],
        (2, 1) => (0..shape[0])
            .map(|r| LaneIter::new(r * shape[1], 1, shape[1]))
            .collect(),
        (2, 0) => (0..shape[1])
            .map(|c| LaneIter::new(c, shape[1], shape[0]))
            .collect(),
        _ => Vec::new(),
    }
}

#[derive(Clone)]
struct LaneIter {
    next: usize,
    stride: usize,
    remaining: usize,
}

impl LaneIter {
    fn new(start: usize, stride: usize, len: usize) -> Self {
        Self {
            next: start,
            stride,
            remaining: len,
        }
    }
}

impl Iterator for LaneIter {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.stride;
        self.remaining -= 1;
        Some(i)
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that stay within `a`, `b` and `c`,
    // which callers size as m×k, k×n and m×n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_view(t: &Tensor) -> Result<(usize, usize)> {
    match t.rank() {
        1 | 2 => Ok((t.rows(), t.cols())),
        _ => Err(Error::InvalidShape {
            op: "row op",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Adjoint of a gradient-requiring leaf after [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.adjoints.borrow().get(self.id).cloned().flatten()
    }

    /// Constant copy of this value, cutting gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn check_same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn emit(&self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var<'t>> {
        let value = value.check_finite(name)?;
        Ok(self.tape.push(value, op, requires_grad))
    }

    fn unary(
        &self,
        name: &str,
        op: Op,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let value = self.with_value(f)?;
        self.emit(value, op, self.requires_grad(), name)
    }

    fn binary(&self, rhs: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.check_same_tape(&rhs)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let (bc, shape) = Broadcast::resolve(name, a.shape(), b.shape())?;
            let numel: usize = shape.iter().product();
            let cols = match shape.len() {
                0 => 1,
                1 => shape[0],
                _ => shape[1],
            };
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let (li, ri) = bc.index(i, cols);
                let (x, y) = (a.data()[li], b.data()[ri]);
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain {
                                op: "div",
                                detail: "division by zero".into(),
                            });
                        }
                        x / y
                    }
                });
            }
            (Tensor::from_parts(shape, data), bc)
        };
        let requires = self.requires_grad() || rhs.requires_grad();
        self.emit(value.0, Op::Binary(kind, self.id, rhs.id, value.1), requires, name)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Div, "div")
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |x| Ok(x.map(|v| v * c)))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&rhs)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::InvalidShape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; n * m];
            gemm(n, k, m, a.data(), k, 1, b.data(), m, 1, &mut c);
            Tensor::from_parts(vec![n, m], c)
        };
        let requires = self.requires_grad() || rhs.requires_grad();
        self.emit(value, Op::MatMul(self.id, rhs.id), requires, "matmul")
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| Ok(x.map(|v| v.max(0.0))))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |x| Ok(x.map(f64::exp)))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), |x| {
            if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("nonpositive operand {bad}"),
                });
            }
            Ok(x.map(f64::ln))
        })
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), |x| Ok(x.map(|v| -v)))
    }

    /// `max(x, floor)` elementwise; the gradient passes where `x >= floor`.
    pub fn clamp_min(self, floor: f64) -> Result<Var<'t>> {
        self.unary("clamp_min", Op::ClampMin(self.id, floor), |x| {
            Ok(x.map(|v| v.max(floor)))
        })
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        self.with_value(|x| {
            let (shape, mut data) = match (axis, x.rank()) {
                (None, _) | (Some(0), 1) => (Vec::new(), vec![x.data().iter().sum::<f64>()]),
                (Some(0), 2) => {
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    let mut s = vec![0.0; c];
                    for i in 0..r {
                        for (acc, v) in s.iter_mut().zip(x.row(i)) {
                            *acc += v;
                        }
                    }
                    (vec![c], s)
                }
                (Some(1), 2) => (
                    vec![x.shape()[0]],
                    (0..x.shape()[0]).map(|i| x.row(i).iter().sum()).collect(),
                ),
                _ => {
                    return Err(Error::InvalidShape {
                        op: "sum",
                        lhs: x.shape().to_vec(),
                        rhs: vec![axis.unwrap_or(0)],
                    })
                }
            };
            if mean {
                let n = (x.numel() / data.len()) as f64;
                data.iter_mut().for_each(|v| *v /= n);
            }
            Ok(Tensor::from_parts(shape, data))
        })
    }

    /// Sum of all elements (shape `[]`).
    pub fn sum(self) -> Result<Var<'t>> {
        self.sum_axis(None)
    }

    /// Sum over `axis` (dropping it), or over everything when `None`.
    pub fn sum_axis(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = self.reduce(axis, false)?;
        self.emit(value, Op::Sum(self.id, axis), self.requires_grad(), "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.mean_axis(None)
    }

    pub fn mean_axis(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = self.reduce(axis, true)?;
        self.emit(value, Op::Mean(self.id, axis), self.requires_grad(), "mean")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary("transpose", Op::Transpose(self.id), |x| {
            if x.rank() != 2 {
                return Err(Error::InvalidShape {
                    op: "transpose",
                    lhs: x.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c, r], data))
        })
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        for p in parts {
            first.check_same_tape(p)?;
        }
        let value = {
            let nodes = first.tape.nodes.borrow();
            let cols = nodes[first.id].value.shape().get(1).copied();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rank() != 2 || Some(v.shape()[1]) != cols {
                    return Err(Error::InvalidShape {
                        op: "concat_rows",
                        lhs: nodes[first.id].value.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            Tensor::from_parts(vec![rows, cols.unwrap_or(0)], data)
        };
        let requires = parts.iter().any(|p| p.requires_grad());
        first.emit(
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            requires,
            "concat_rows",
        )
    }

    /// Softmax of each row (a rank-1 tensor is a single row).
    pub fn row_softmax(self) -> Result<Var<'t>> {
        self.unary("row_softmax", Op::RowSoftmax(self.id), |x| {
            let (_, cols) = row_view(x)?;
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                data.extend(exps.into_iter().map(|e| e / total));
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })
    }

    /// Log-softmax of each row, stabilised by max subtraction.
    pub fn row_log_softmax(self) -> Result<Var<'t>> {
        self.unary("row_log_softmax", Op::RowLogSoftmax(self.id), |x| {
            let (_, cols) = row_view(x)?;
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })
    }

    /// Scales each slice along `axis` to unit Euclidean norm. Slices with
    /// norm below `eps` pass through unchanged.
    pub fn l2_normalize(self, axis: usize, eps: f64) -> Result<Var<'t>> {
        let op = Op::L2Normalize {
            input: self.id,
            axis,
            eps,
        };
        self.unary("l2_normalize", op, |x| {
            if axis >= x.rank() || x.rank() > 2 {
                return Err(Error::InvalidShape {
                    op: "l2_normalize",
                    lhs: x.shape().to_vec(),
                    rhs: vec![axis],
                });
            }
            let mut data = x.data().to_vec();
            for lane in lanes(x.shape(), axis) {
                let norm = lane
                    .clone()
                    .map(|i| x.data()[i] * x.data()[i])
                    .sum::<f64>()
                    .sqrt();
                if norm >= eps {
                    for i in lane {
                        data[i] = x.data()[i] / norm;
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })
    }
}

/// Applies a primitive by kind. Reductions reduce over every element.
pub fn forward_op<'t>(kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let arity = match kind {
        OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Sub | OpKind::Div => 2,
        OpKind::ConcatRows => usize::MAX,
        _ => 1,
    };
    if (arity != usize::MAX && inputs.len() != arity) || inputs.is_empty() {
        return Err(Error::contract(format!(
            "{kind:?} expects {arity} inputs, got {}",
            inputs.len()
        )));
    }
    let a = inputs[0];
    match kind {
        OpKind::MatMul => a.matmul(inputs[1]),
        OpKind::Add => a.add(inputs[1]),
        OpKind::Mul => a.mul(inputs[1]),
        OpKind::Sub => a.sub(inputs[1]),
        OpKind::Div => a.div(inputs[1]),
        OpKind::Relu => a.relu(),
        OpKind::Exp => a.exp(),
        OpKind::Log => a.log(),
        OpKind::Sum => a.sum(),
        OpKind::Mean => a.mean(),
        OpKind::Neg => a.neg(),
        OpKind::Transpose => a.transpose(),
        OpKind::ConcatRows => Var::concat_rows(inputs),
        OpKind::RowSoftmax => a.row_softmax(),
        OpKind::RowLogSoftmax => a.row_log_softmax(),
    }
}

/// Evaluates `f` on a fresh tape without tracking gradients.
pub fn eval_no_grad(inputs: &[Tensor], f: impl for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    Ok(out.value())
}

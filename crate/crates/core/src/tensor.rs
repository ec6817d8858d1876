//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! from plain [`Tensor`] values; every operation on a [`Var`] appends a node
//! holding its forward value, so the node list is already in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting follows trailing alignment only: the smaller operand's shape
//! must be a suffix of the larger one (or hold a single element).

use std::cell::RefCell;
use std::fmt;

use crate::error::{contract, Error, Result};
use crate::par::{self, Execution};

/// Row-major dense array with an optional gradient slot.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return contract(format!("tensor shape {shape:?} has a zero dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    GatherLast(usize, Vec<usize>),
    ConcatCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    Reshape(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Gradient tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    exec: Execution,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (na, nb) = (numel(a), numel(b));
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 && na >= 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(a.to_vec());
    }
    if a.len() <= b.len() && b[b.len() - a.len()..] == *a {
        return Ok(b.to_vec());
    }
    Err(Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Accumulates `g` (output-shaped) into an operand of `n` elements, summing
/// over the broadcast repeats.
fn reduce_into(dst: &mut [f64], g: &[f64], scale: impl Fn(usize) -> f64) {
    let n = dst.len();
    for (i, gi) in g.iter().enumerate() {
        dst[i % n] += gi * scale(i);
    }
}

fn matmul_into(exec: Execution, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let exec = if m * k * n < 1 << 16 {
        Execution::Sequential
    } else {
        exec
    };
    par::for_each_chunk_mut(exec, &mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_execution(exec: Execution) -> Self {
        Tape {
            nodes: RefCell::default(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a tensor as a leaf; it participates in backward iff
    /// `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Leaf that always requires grad.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true)
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into the
    /// `requires_grad` leaves until [`Tape::zero_grads`] is called.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return contract("loss belongs to a different tape");
        }
        let mut nodes = self.nodes.borrow_mut();
        if numel(&nodes[loss.id].shape) != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            let op = nodes[id].op.clone();
            if let Op::Leaf = op {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            backprop_node(self.exec, &nodes, id, &op, &g, &mut grads);
        }
        Ok(())
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(
    exec: Execution,
    nodes: &[Node],
    id: usize,
    op: &Op,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let out = &nodes[id].value;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, a) {
                reduce_into(ga, g, |_| 1.0);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                reduce_into(gb, g, |_| 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, a) {
                reduce_into(ga, g, |_| 1.0);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                reduce_into(gb, g, |_| -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = slot(grads, nodes, a) {
                reduce_into(ga, g, |i| vb[i % vb.len()]);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                reduce_into(gb, g, |i| va[i % va.len()]);
            }
        }
        Op::Neg(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi);
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
        }
        Op::Square(a) => {
            let va = &nodes[a].value;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..ga.len() {
                    ga[i] += 2.0 * va[i] * g[i];
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..ga.len() {
                    ga[i] += (1.0 - out[i] * out[i]) * g[i];
                }
            }
        }
        Op::Relu(a) => {
            let va = &nodes[a].value;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..ga.len() {
                    if va[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..ga.len() {
                    ga[i] += out[i] * g[i];
                }
            }
        }
        Op::Log(a) => {
            let va = &nodes[a].value;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] / va[i];
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                // dA = G · Bᵀ
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = vb[p * n + j];
                    }
                }
                let da = matmul_into(exec, g, &bt, m, n, k);
                let ga = slot(grads, nodes, a).unwrap();
                ga.iter_mut().zip(&da).for_each(|(x, d)| *x += d);
            }
            if nodes[b].requires_grad {
                // dB = Aᵀ · G
                let mut at = vec![0.0; k * m];
                for i in 0..m {
                    for p in 0..k {
                        at[p * m + i] = va[i * k + p];
                    }
                }
                let db = matmul_into(exec, &at, g, k, m, n);
                let gb = slot(grads, nodes, b).unwrap();
                gb.iter_mut().zip(&db).for_each(|(x, d)| *x += d);
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumLast(a) => {
            let n = *nodes[a].shape.last().unwrap_or(&1);
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / n];
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = *nodes[a].shape.last().unwrap_or(&1);
            if let Some(ga) = slot(grads, nodes, a) {
                for r in 0..ga.len() / n {
                    let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                    for j in 0..n {
                        let i = r * n + j;
                        ga[i] += g[i] - out[i].exp() * gs;
                    }
                }
            }
        }
        Op::LogSumExp(a) => {
            let va = &nodes[a].value;
            let lse = out[0];
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..ga.len() {
                    ga[i] += g[0] * (va[i] - lse).exp();
                }
            }
        }
        Op::GatherLast(a, ref idx) => {
            let n = *nodes[a].shape.last().unwrap_or(&1);
            if let Some(ga) = slot(grads, nodes, a) {
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * n + j] += g[r];
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let p = nodes[a].shape[1];
            let q = nodes[b].shape[1];
            let rows = nodes[a].shape[0];
            if let Some(ga) = slot(grads, nodes, a) {
                for r in 0..rows {
                    for j in 0..p {
                        ga[r * p + j] += g[r * (p + q) + j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for r in 0..rows {
                    for j in 0..q {
                        gb[r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            }
        }
        Op::SelectRows(a, ref idx) => {
            let width = nodes[a].value.len() / nodes[a].shape[0];
            if let Some(ga) = slot(grads, nodes, a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..width {
                        ga[src * width + j] += g[r * width + j];
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// The single element of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad.as_ref().map(|g| Tensor {
            shape: n.shape.clone(),
            data: g.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            contract("operands live on different tapes")
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(op, shape, value, rg)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(name, &a.shape, &b.shape)?;
            let n = numel(&shape);
            let (la, lb) = (a.value.len(), b.value.len());
            let value = (0..n).map(|i| f(a.value[i % la], b.value[i % lb])).collect();
            (shape, value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(op, shape, value, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.unary(Op::Exp(self.id), f64::exp);
        if let Some(bad) = v.data().iter().position(|x| !x.is_finite()) {
            let arg = self.tape.nodes.borrow()[self.id].value[bad];
            return Err(Error::NumericDomain {
                op: "exp",
                detail: format!("exp({arg}) is not finite"),
            });
        }
        Ok(v)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(&bad) = nodes[self.id].value.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::NumericDomain {
                    op: "log",
                    detail: format!("log({bad}) outside domain"),
                });
            }
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (
                vec![m, n],
                matmul_into(self.tape.exec, &a.value, &b.value, m, k, n),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(Op::MatMul(self.id, other.id), shape, value, rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum::<f64>(), n.requires_grad)
        };
        self.tape.push(Op::Sum(self.id), vec![], vec![v], rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.value.iter().sum::<f64>() / n.value.len() as f64,
                n.requires_grad,
            )
        };
        self.tape.push(Op::Mean(self.id), vec![], vec![v], rg)
    }

    /// Sums out the last axis.
    pub fn sum_last(&self) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let n = *node.shape.last().unwrap_or(&1);
            let shape = node.shape[..node.shape.len().saturating_sub(1)].to_vec();
            let value = node.value.chunks(n).map(|c| c.iter().sum()).collect();
            (shape, value, node.requires_grad)
        };
        self.tape.push(Op::SumLast(self.id), shape, value, rg)
    }

    /// Log-softmax along the last axis, stabilised by max subtraction.
    pub fn log_softmax(&self) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let n = *node.shape.last().unwrap_or(&1);
            let mut value = Vec::with_capacity(node.value.len());
            for row in node.value.chunks(n) {
                let lse = log_sum_exp(row);
                value.extend(row.iter().map(|x| x - lse));
            }
            (node.shape.clone(), value, node.requires_grad)
        };
        self.tape.push(Op::LogSoftmax(self.id), shape, value, rg)
    }

    /// `log Σ exp(x)` over every element, computed without overflow.
    pub fn log_sum_exp(&self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (log_sum_exp(&n.value), n.requires_grad)
        };
        self.tape.push(Op::LogSumExp(self.id), vec![], vec![v], rg)
    }

    /// Picks `x[r, idx[r]]` from a 2-D tensor.
    pub fn gather_last(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            if node.shape.len() != 2 || node.shape[0] != idx.len() {
                return Err(Error::Dimension {
                    op: "gather_last",
                    lhs: node.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let n = node.shape[1];
            if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
                return contract(format!("gather index {bad} out of range for width {n}"));
            }
            let value = idx
                .iter()
                .enumerate()
                .map(|(r, &j)| node.value[r * n + j])
                .collect();
            (value, node.requires_grad)
        };
        Ok(self
            .tape
            .push(Op::GatherLast(self.id, idx.to_vec()), vec![idx.len()], value, rg))
    }

    /// Horizontal concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (rows, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut value = Vec::with_capacity(rows * (p + q));
            for r in 0..rows {
                value.extend_from_slice(&a.value[r * p..(r + 1) * p]);
                value.extend_from_slice(&b.value[r * q..(r + 1) * q]);
            }
            (vec![rows, p + q], value, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(Op::ConcatCols(self.id, other.id), shape, value, rg))
    }

    /// Gathers rows (first axis) by index; indices may repeat.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            if node.shape.is_empty() {
                return contract("select_rows on a scalar");
            }
            let rows = node.shape[0];
            let width = node.value.len() / rows;
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return contract(format!("row index {bad} out of range for {rows} rows"));
            }
            let mut value = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                value.extend_from_slice(&node.value[i * width..(i + 1) * width]);
            }
            let mut shape = node.shape.clone();
            shape[0] = idx.len();
            (shape, value, node.requires_grad)
        };
        Ok(self
            .tape
            .push(Op::SelectRows(self.id, idx.to_vec()), shape, value, rg))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            if numel(&shape) != node.value.len() {
                return Err(Error::Dimension {
                    op: "reshape",
                    lhs: node.shape.clone(),
                    rhs: shape,
                });
            }
            (node.value.clone(), node.requires_grad)
        };
        Ok(self.tape.push(Op::Reshape(self.id), shape, value, rg))
    }

    /// Copy of this value with no path back through the tape.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.clone())
        };
        self.tape.push(Op::Leaf, shape, value, false)
    }
}

/// Applies one of the named elementwise operations. Binary ops take two
/// arguments, unary ops one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Neg,
}

pub fn elementwise<'t>(op: Elementwise, args: &[Var<'t>]) -> Result<Var<'t>> {
    let arity = match op {
        Elementwise::Add | Elementwise::Mul => 2,
        _ => 1,
    };
    if args.len() != arity {
        return contract(format!("{op:?} takes {arity} argument(s), got {}", args.len()));
    }
    let a = &args[0];
    match op {
        Elementwise::Add => a.add(&args[1]),
        Elementwise::Mul => a.mul(&args[1]),
        Elementwise::Tanh => Ok(a.tanh()),
        Elementwise::Relu => Ok(a.relu()),
        Elementwise::Exp => a.exp(),
        Elementwise::Log => a.log(),
        Elementwise::Square => Ok(a.square()),
        Elementwise::Neg => Ok(a.neg()),
    }
}

/// Max-shifted `log Σ exp(x)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

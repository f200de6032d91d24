//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so node ids are
//! already a topological order and the backward sweep is a reverse scan.
//! All matrix-style ops treat a tensor of shape `[.., n]` as a matrix of
//! `rows = product(leading dims)` by `cols = n`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    Scale(usize, f64),
    OneMinus(usize),
    Sigmoid(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { a: usize, eps: f64 },
    Transpose { a: usize, rows: usize, cols: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize, end: usize },
    GatherRows { a: usize, index: Vec<usize> },
    GatherFlat { a: usize, index: Vec<usize> },
    Scatter { a: usize, positions: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Reshape(usize),
    Dropout { a: usize, mask: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.borrow().len())
            .field("params", &self.params.borrow().len())
            .finish()
    }
}

/// Handle to a recorded tensor.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Untracked value.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// Tracked leaf that is not a stored parameter (inputs under test).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Tracked view of a stored parameter. Repeated lookups share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Runs the reverse sweep from a scalar loss.
    ///
    /// A second call without [`Graph::reset_grads`] is rejected.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::contract(
                "backward already ran on this graph; reset gradients first",
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient of the last backward pass with respect to `var`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.as_ref()?.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    /// Gradients for every parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| {
                self.grad(Var { graph: self, id: node }).map(|g| (pid, g))
            })
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Constant | Op::Leaf | Op::Param => {}
        &Op::MatMul { a, b, m, k, n } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            accumulate(nodes, grads, a, |da| {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, b, |db| {
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip != 0.0 {
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, x) in drow.iter_mut().zip(gi) {
                                *d += aip * x;
                            }
                        }
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, |d| add_into(d, g));
            accumulate(nodes, grads, b, |d| add_into(d, g));
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |d| add_into(d, g));
            accumulate(nodes, grads, b, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        &Op::Mul(a, b) => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            accumulate(nodes, grads, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        &Op::AddRow { a, row } => {
            let n = nodes[row].value.numel();
            accumulate(nodes, grads, a, |d| add_into(d, g));
            accumulate(nodes, grads, row, |d| {
                for (i, x) in g.iter().enumerate() {
                    d[i % n] += x;
                }
            });
        }
        &Op::MulRow { a, row } => {
            let av = nodes[a].value.data();
            let rv = nodes[row].value.data();
            let n = rv.len();
            accumulate(nodes, grads, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * rv[i % n];
                }
            });
            accumulate(nodes, grads, row, |d| {
                for (i, x) in g.iter().enumerate() {
                    d[i % n] += x * av[i];
                }
            });
        }
        &Op::Scale(a, c) => accumulate(nodes, grads, a, |d| {
            for (x, y) in d.iter_mut().zip(g) {
                *x += c * y;
            }
        }),
        &Op::OneMinus(a) => accumulate(nodes, grads, a, |d| {
            for (x, y) in d.iter_mut().zip(g) {
                *x -= y;
            }
        }),
        &Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(nodes, grads, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        &Op::Gelu(a) => {
            let x = nodes[a].value.data();
            accumulate(nodes, grads, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * gelu_parts(x[i]).1;
                }
            });
        }
        &Op::SoftmaxRows(a) => {
            let y = out.data();
            let c = out.cols();
            accumulate(nodes, grads, a, |d| {
                for r in 0..y.len() / c.max(1) {
                    let s = r * c..(r + 1) * c;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum();
                    for i in s {
                        d[i] += y[i] * (g[i] - dot);
                    }
                }
            });
        }
        &Op::LogSoftmaxRows(a) => {
            let y = out.data();
            let c = out.cols();
            accumulate(nodes, grads, a, |d| {
                for r in 0..y.len() / c.max(1) {
                    let s = r * c..(r + 1) * c;
                    let gsum: f64 = g[s.clone()].iter().sum();
                    for i in s {
                        d[i] += g[i] - y[i].exp() * gsum;
                    }
                }
            });
        }
        &Op::LayerNormRows { a, eps } => {
            let x = nodes[a].value.data();
            let c = out.cols();
            accumulate(nodes, grads, a, |d| {
                for r in 0..x.len() / c.max(1) {
                    let row = &x[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let (mean, inv) = moments(row, eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gmean = gr.iter().sum::<f64>() / c as f64;
                    let gx = gr.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[r * c + j] += inv * (gr[j] - gmean - xhat[j] * gx);
                    }
                }
            });
        }
        &Op::Transpose { a, rows, cols } => accumulate(nodes, grads, a, |d| {
            for i in 0..rows {
                for j in 0..cols {
                    d[i * cols + j] += g[j * rows + i];
                }
            }
        }),
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                accumulate(nodes, grads, p, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                accumulate(nodes, grads, p, |d| add_into(d, &g[offset..offset + n]));
                offset += n;
            }
        }
        &Op::SliceCols { a, start, end } => {
            let c = nodes[a].value.cols();
            let w = end - start;
            accumulate(nodes, grads, a, |d| {
                for r in 0..g.len() / w.max(1) {
                    add_into(&mut d[r * c + start..r * c + end], &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::GatherRows { a, index } => {
            let c = nodes[*a].value.cols();
            accumulate(nodes, grads, *a, |d| {
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut d[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            });
        }
        Op::GatherFlat { a, index } => accumulate(nodes, grads, *a, |d| {
            for (r, &src) in index.iter().enumerate() {
                d[src] += g[r];
            }
        }),
        Op::Scatter { a, positions } => accumulate(nodes, grads, *a, |d| {
            for (i, &p) in positions.iter().enumerate() {
                d[i] += g[p];
            }
        }),
        &Op::Sum(a) => accumulate(nodes, grads, a, |d| {
            for x in d.iter_mut() {
                *x += g[0];
            }
        }),
        &Op::Mean(a) => accumulate(nodes, grads, a, |d| {
            let s = g[0] / d.len() as f64;
            for x in d.iter_mut() {
                *x += s;
            }
        }),
        &Op::SumCols(a) => {
            let c = nodes[a].value.cols();
            accumulate(nodes, grads, a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i / c];
                }
            });
        }
        &Op::Reshape(a) => accumulate(nodes, grads, a, |d| add_into(d, g)),
        Op::Dropout { a, mask } => accumulate(nodes, grads, *a, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * mask[i];
            }
        }),
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.value().rows()
    }

    pub fn cols(self) -> usize {
        self.value().cols()
    }

    pub fn item(self) -> f64 {
        self.value().data()[0]
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.needs(self.id);
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(value, op, rg)
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value();
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = rhs.value();
        if b.shape().len() != 2 || a.cols() != b.shape()[0] {
            return Err(dim_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.shape()[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let mut shape = a.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = n,
            None => shape.push(n),
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.binary(rhs, t, Op::MatMul { a: self.id, b: rhs.id, m, k, n }))
    }

    fn zip_same(self, other: Var<'g>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(dim_err(name, a.shape(), b.shape()));
        }
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, t, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, t, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, t, Op::Mul(self.id, other.id)))
    }

    /// Broadcasts a `[n]` vector over every row of `[.., n]`.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let r = row.value();
        if r.numel() != a.cols() {
            return Err(dim_err("add_row", a.shape(), r.shape()));
        }
        let n = r.numel();
        let data = a.data().iter().enumerate().map(|(i, x)| x + r.data()[i % n]).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(row, t, Op::AddRow { a: self.id, row: row.id }))
    }

    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let r = row.value();
        if r.numel() != a.cols() {
            return Err(dim_err("mul_row", a.shape(), r.shape()));
        }
        let n = r.numel();
        let data = a.data().iter().enumerate().map(|(i, x)| x * r.data()[i % n]).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(row, t, Op::MulRow { a: self.id, row: row.id }))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let t = self.map(|x| c * x);
        self.unary(t, Op::Scale(self.id, c))
    }

    pub fn one_minus(self) -> Var<'g> {
        let t = self.map(|x| 1.0 - x);
        self.unary(t, Op::OneMinus(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let t = self.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(t, Op::Sigmoid(self.id))
    }

    pub fn gelu(self) -> Var<'g> {
        let t = self.map(|x| gelu_parts(x).0);
        self.unary(t, Op::Gelu(self.id))
    }

    /// Softmax along the trailing axis, max-subtracted.
    pub fn softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let c = a.cols();
        if c == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let mut out = vec![0.0; a.numel()];
        for r in 0..a.rows() {
            softmax_row(a.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.unary(t, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let a = self.value();
        let c = a.cols();
        if c == 0 {
            return Err(Error::dim("log_softmax over an empty axis"));
        }
        let mut out = vec![0.0; a.numel()];
        for r in 0..a.rows() {
            let row = a.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
            }
        }
        let t = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.unary(t, Op::LogSoftmaxRows(self.id)))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let a = self.value();
        let c = a.cols();
        let mut out = vec![0.0; a.numel()];
        for r in 0..a.rows() {
            let (mean, inv) = moments(a.row(r), eps);
            for j in 0..c {
                out[r * c + j] = (a.row(r)[j] - mean) * inv;
            }
        }
        let t = Tensor::new(a.shape().to_vec(), out).expect("shape preserved");
        self.unary(t, Op::LayerNormRows { a: self.id, eps })
    }

    /// Transpose of a matrix view `[rows, cols] -> [cols, rows]`.
    pub fn transpose(self) -> Var<'g> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = vec![0.0; a.numel()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a.data()[i * cols + j];
            }
        }
        let t = Tensor::new(vec![cols, rows], out).expect("transpose");
        self.unary(t, Op::Transpose { a: self.id, rows, cols })
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let graph = first.graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        if values.iter().any(|v| v.rows() != rows) {
            let shapes: Vec<_> = values.iter().map(|v| v.shape().to_vec()).collect();
            return Err(Error::dim(format!("concat_cols: row counts differ in {shapes:?}")));
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let mut shape = values[0].shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = total,
            None => shape.push(total),
        }
        let rg = parts.iter().any(|p| graph.needs(p.id));
        let t = Tensor::new(shape, out)?;
        Ok(graph.push(t, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Stacks `[r_i, n]` (or `[n]`) tensors into `[sum r_i, n]`.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let graph = first.graph;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        if values.iter().any(|v| v.cols() != cols) {
            let shapes: Vec<_> = values.iter().map(|v| v.shape().to_vec()).collect();
            return Err(Error::dim(format!("concat_rows: column counts differ in {shapes:?}")));
        }
        let rows: usize = values.iter().map(|v| v.rows()).sum();
        let out: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let rg = parts.iter().any(|p| graph.needs(p.id));
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(graph.push(t, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let a = self.value();
        let c = a.cols();
        if start >= end || end > c {
            return Err(Error::dim(format!("slice_cols {start}..{end} out of range for {:?}", a.shape())));
        }
        let mut out = Vec::with_capacity(a.rows() * (end - start));
        for r in 0..a.rows() {
            out.extend_from_slice(&a.row(r)[start..end]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = end - start;
        let t = Tensor::new(shape, out)?;
        Ok(self.unary(t, Op::SliceCols { a: self.id, start, end }))
    }

    /// Selects rows by index (repeats allowed): `[r, n] -> [index.len(), n]`.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let rows = a.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather_rows: row {bad} out of range for {:?}", a.shape())));
        }
        let out: Vec<f64> = index.iter().flat_map(|&i| a.row(i).iter().copied()).collect();
        let t = Tensor::new(vec![index.len(), a.cols()], out)?;
        Ok(self.unary(t, Op::GatherRows { a: self.id, index: index.to_vec() }))
    }

    /// Row `i` as a `[n]` vector.
    pub fn row(self, i: usize) -> Result<Var<'g>> {
        let n = self.cols();
        self.gather_rows(&[i])?.reshape(vec![n])
    }

    /// Picks flat elements: `out[i] = self.flat[index[i]]`, shape `[index.len()]`.
    pub fn gather_flat(self, index: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= a.numel()) {
            return Err(Error::dim(format!("gather_flat: index {bad} out of range for {:?}", a.shape())));
        }
        let out = index.iter().map(|&i| a.data()[i]).collect();
        let t = Tensor::new(vec![index.len()], out)?;
        Ok(self.unary(t, Op::GatherFlat { a: self.id, index: index.to_vec() }))
    }

    /// Writes this tensor's elements into flat `positions` of a new tensor
    /// of `shape`, every other element set to `fill`. Positions must be distinct.
    pub fn scatter(self, shape: Vec<usize>, positions: &[usize], fill: f64) -> Result<Var<'g>> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if positions.len() != a.numel() {
            return Err(Error::dim(format!(
                "scatter: {} positions for {} values",
                positions.len(),
                a.numel()
            )));
        }
        let mut out = vec![fill; n];
        let mut seen = vec![false; n];
        for (&p, &v) in positions.iter().zip(a.data()) {
            if p >= n || seen[p] {
                return Err(Error::dim(format!("scatter: bad or repeated position {p}")));
            }
            seen[p] = true;
            out[p] = v;
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.unary(t, Op::Scatter { a: self.id, positions: positions.to_vec() }))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Sums each row: `[r, n] -> [r]`.
    pub fn sum_cols(self) -> Var<'g> {
        let a = self.value();
        let out: Vec<f64> = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
        self.unary(Tensor::vector(out), Op::SumCols(self.id))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn apply_mask(self, mask: Vec<f64>) -> Result<Var<'g>> {
        let a = self.value();
        if mask.len() != a.numel() {
            return Err(Error::dim("dropout mask size mismatch"));
        }
        let out = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.unary(t, Op::Dropout { a: self.id, mask }))
    }
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, so node inputs always precede the node itself. [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar loss
//! with respect to every node that requires one. A fresh tape is built for
//! each forward pass.
//!
//! ```
//! use maskwright::autodiff::Tape;
//! use maskwright::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, reduction_map, split_axis, ConvGeom, Padding, Tensor};

/// Index of a node on its tape.
pub type NodeId = usize;

/// SELU scale constants.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Elementwise nonlinearities recorded as a single tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Selu,
    Abs,
    Square,
    /// `x ln x` with `0 ln 0 = 0`.
    XLogX,
}

/// Elementwise binary operations over equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    AddBias { x: NodeId, b: NodeId, axis: usize },
    Conv2d { x: NodeId, k: NodeId, geom: ConvGeom },
    Sum { x: NodeId, map: Rc<Vec<usize>> },
    Mean { x: NodeId, map: Rc<Vec<usize>>, count: usize },
    Max { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Upsample2x(NodeId),
    AvgPool2x(NodeId),
    Narrow { x: NodeId, axis: usize, start: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Reverse { x: NodeId, axis: usize },
    SwapLast2(NodeId),
    Select { x: NodeId, axis: usize, index: usize },
    Stack { parts: Vec<NodeId>, axis: usize },
    ExpandAxis { x: NodeId, axis: usize },
    Embedding { table: NodeId, ids: Rc<Vec<usize>> },
    CrossEntropy { logits: NodeId, labels: Rc<Vec<usize>>, probs: Vec<f64> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not require a gradient or the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::from_vec(&self.shapes[id], g.clone()).expect("gradient shape"))
    }

    pub(crate) fn slice(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id)?.as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input tensor. Gradients are only produced for leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Looks up `ids` in the rows of `table` (shape `[V, D]`); the result has
    /// shape `shape + [D]`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        self.same_tape(table);
        let t = table.value();
        if t.rank() != 2 {
            return Err(Error::size(format!("embedding table must be [V,D], got {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::size(format!("{} ids do not fill shape {shape:?}", ids.len())));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} out of range for vocabulary {v}")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, Op::Embedding { table: table.id, ids: Rc::new(ids.to_vec()) }, table.requires_grad()))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn same_tape(&self, v: Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variables from different tapes");
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a one-element `loss`. Gradients accumulate
    /// additively where a node feeds several consumers.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.same_tape(loss);
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Adds `src` into the gradient slot of `id`, allocating on first touch.
fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (a, b) = (*a, *b);
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(ga) = acc(nodes, grads, a) {
                match kind {
                    Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(d, &g)| *d += g),
                    Binary::Mul => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    Binary::Div => {
                        for i in 0..g.len() {
                            ga[i] += g[i] / bv[i];
                        }
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                match kind {
                    Binary::Add => gb.iter_mut().zip(g).for_each(|(d, &g)| *d += g),
                    Binary::Sub => gb.iter_mut().zip(g).for_each(|(d, &g)| *d -= g),
                    Binary::Mul => {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                    Binary::Div => {
                        for i in 0..g.len() {
                            gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    }
                }
            }
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * unary_deriv(*kind, x[i], y[i]);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s);
            }
        }
        Op::Offset(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                gemm_nt(m, n, k, g, bv.data(), ga);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                gemm_tn(k, m, n, av.data(), g, gb);
            }
        }
        Op::AddBias { x, b, axis } => {
            let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for o in 0..outer {
                    for j in 0..dim {
                        let base = (o * dim + j) * inner;
                        gb[j] += g[base..base + inner].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Conv2d { x, k, geom } => {
            let xv = Rc::clone(&nodes[*x].value);
            let kv = Rc::clone(&nodes[*k].value);
            let mut dx = nodes[*x].requires_grad.then(|| vec![0.0; xv.len()]);
            let mut dk = nodes[*k].requires_grad.then(|| vec![0.0; kv.len()]);
            geom.backward(xv.data(), kv.data(), g, dx.as_deref_mut(), dk.as_deref_mut());
            if let (Some(dx), Some(gx)) = (dx, acc(nodes, grads, *x)) {
                gx.iter_mut().zip(dx).for_each(|(d, v)| *d += v);
            }
            if let (Some(dk), Some(gk)) = (dk, acc(nodes, grads, *k)) {
                gk.iter_mut().zip(dk).for_each(|(d, v)| *d += v);
            }
        }
        Op::Sum { x, map } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (d, &o) in gx.iter_mut().zip(map.iter()) {
                    *d += g[o];
                }
            }
        }
        Op::Mean { x, map, count } => {
            let inv = 1.0 / *count as f64;
            if let Some(gx) = acc(nodes, grads, *x) {
                for (d, &o) in gx.iter_mut().zip(map.iter()) {
                    *d += g[o] * inv;
                }
            }
        }
        Op::Max { x, argmax } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        Op::Upsample2x(x) => {
            let s = nodes[*x].value.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = nodes[*x].value.len() / (h * w);
            if let Some(gx) = acc(nodes, grads, *x) {
                for p in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
            }
        }
        Op::AvgPool2x(x) => {
            let s = nodes[*x].value.shape();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = nodes[*x].value.len() / (h * w);
            let (ho, wo) = (h / 2, w / 2);
            if let Some(gx) = acc(nodes, grads, *x) {
                for p in 0..planes {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(p * h + i) * w + j] += 0.25 * g[(p * ho + i / 2) * wo + j / 2];
                        }
                    }
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, dim, inner) = split_axis(nodes[*x].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut gx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if let Some(gp) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                offset += len;
            }
        }
        Op::Reverse { x, axis } => {
            let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..dim {
                        let src = (o * dim + dim - 1 - j) * inner;
                        let dst = (o * dim + j) * inner;
                        for i in 0..inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
            }
        }
        Op::SwapLast2(x) => {
            let s = nodes[*x].value.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = nodes[*x].value.len() / (r * c);
            if let Some(gx) = acc(nodes, grads, *x) {
                for p in 0..planes {
                    for i in 0..r {
                        for j in 0..c {
                            gx[p * r * c + i * c + j] += g[p * r * c + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Select { x, axis, index } => {
            let (outer, dim, inner) = split_axis(nodes[*x].value.shape(), *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * dim + index) * inner..(o * dim + index + 1) * inner];
                    dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Stack { parts, axis } => {
            let (outer, count, inner) = split_axis(node.value.shape(), *axis);
            for (p_idx, &p) in parts.iter().enumerate() {
                if let Some(gp) = acc(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * count + p_idx) * inner..(o * count + p_idx + 1) * inner];
                        gp[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        Op::ExpandAxis { x, axis } => {
            let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for j in 0..dim {
                        let src = &g[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                        gx[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            if let Some(gt) = acc(nodes, grads, *table) {
                for (pos, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[pos * d + c];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / n as f64;
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let d = inv_std.len();
            let m = g.len() / d;
            let gamma_v = Rc::clone(&nodes[*gamma].value);
            let mut sum_g = vec![0.0; d];
            let mut sum_g_xhat = vec![0.0; d];
            for r in 0..m {
                for c in 0..d {
                    sum_g[c] += g[r * d + c];
                    sum_g_xhat[c] += g[r * d + c] * xhat[r * d + c];
                }
            }
            if let Some(gg) = acc(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_g_xhat).for_each(|(d, &v)| *d += v);
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let mf = m as f64;
                for r in 0..m {
                    for c in 0..d {
                        let i = r * d + c;
                        let scale = gamma_v.data()[c] * inv_std[c];
                        gx[i] += if *batch_stats {
                            scale * (g[i] - sum_g[c] / mf - xhat[i] * sum_g_xhat[c] / mf)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn unary_value(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Tanh => x.tanh(),
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
            }
        }
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::XLogX => {
            if x == 0.0 {
                0.0
            } else {
                x * x.ln()
            }
        }
    }
}

fn unary_deriv(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
        Unary::Selu => {
            if x > 0.0 {
                SELU_LAMBDA
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp()
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        // the derivative diverges at 0; clamp to the smallest normal
        Unary::XLogX => x.max(f64::MIN_POSITIVE).ln() + 1.0,
    }
}

// Arithmetic is fallible (shape checks), so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.requires(self.id)
    }

    fn derived(self, value: Tensor, op: Op, requires_grad: bool) -> Var<'t> {
        self.tape.push(value, op, requires_grad)
    }

    pub fn binary(self, kind: Binary, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::size(format!("elementwise {kind:?} on shapes {:?} and {:?}", a.shape(), b.shape())));
        }
        if kind == Binary::Div {
            if let Some(i) = b.data().iter().position(|&v| v == 0.0) {
                return Err(Error::Domain(format!("division by zero at element {i}")));
            }
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.derived(out, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, other)
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let out = self.value().map(|v| unary_value(kind, v));
        self.derived(out, Op::Unary(kind, self.id), self.requires_grad())
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    /// Natural log; every element must be positive.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(v) = self.value().data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of nonpositive value {v}")));
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(v) = self.value().data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("sqrt of nonpositive value {v}")));
        }
        Ok(self.unary(Unary::Sqrt))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn selu(self) -> Var<'t> {
        self.unary(Unary::Selu)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    /// `x ln x` elementwise with `0 ln 0 = 0`; negative inputs are a domain error.
    pub fn xlogx(self) -> Result<Var<'t>> {
        if let Some(v) = self.value().data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("x ln x of negative value {v}")));
        }
        Ok(self.unary(Unary::XLogX))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.derived(out, Op::Scale(self.id, s), self.requires_grad())
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.derived(out, Op::Offset(self.id), self.requires_grad())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::size(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, a.data(), b.data(), &mut c);
        let out = Tensor::from_vec(&[m, n], c)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.derived(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Adds the vector `bias` along `axis`, broadcasting over the other axes.
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.tape.same_tape(bias);
        let x = self.value();
        let b = bias.value();
        if axis >= x.rank() {
            return Err(Error::Axis(format!("bias axis {axis} out of range for rank {}", x.rank())));
        }
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        if b.len() != dim {
            return Err(Error::size(format!("bias of length {} on axis of size {dim}", b.len())));
        }
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for j in 0..dim {
                let bj = b.data()[j];
                for v in &mut data[(o * dim + j) * inner..(o * dim + j + 1) * inner] {
                    *v += bj;
                }
            }
        }
        let out = Tensor::from_vec(x.shape(), data)?;
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.derived(out, Op::AddBias { x: self.id, b: bias.id, axis }, rg))
    }

    /// Cross-correlation of `[N,C,H,W]` (or unbatched `[C,H,W]`) input with
    /// `[O,C,kh,kw]` kernels.
    pub fn conv2d(self, kernels: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        self.tape.same_tape(kernels);
        let shape = self.shape();
        if shape.len() == 3 {
            let batched = self.reshape(&[1, shape[0], shape[1], shape[2]])?;
            let out = batched.conv2d(kernels, padding)?;
            let os = out.shape();
            return out.reshape(&os[1..]);
        }
        let kv = kernels.value();
        let geom = ConvGeom::new(&shape, kv.shape(), padding)?;
        let x = self.value();
        let data = geom.forward(x.data(), kv.data());
        let out = Tensor::from_vec(&[geom.batch, geom.c_out, geom.ho, geom.wo], data)?;
        let rg = self.requires_grad() || kernels.requires_grad();
        Ok(self.derived(out, Op::Conv2d { x: self.id, k: kernels.id, geom }, rg))
    }

    /// 1-D cross-correlation of `[N,C,T]` (or unbatched `[C,T]`) input with
    /// `[O,C,k]` kernels.
    pub fn conv1d(self, kernels: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        let shape = self.shape();
        let ks = kernels.shape();
        if ks.len() != 3 {
            return Err(Error::size(format!("conv1d kernels must be [O,C,k], got {ks:?}")));
        }
        let (x4, unbatched) = match shape.len() {
            2 => (self.reshape(&[1, shape[0], 1, shape[1]])?, true),
            3 => (self.reshape(&[shape[0], shape[1], 1, shape[2]])?, false),
            _ => return Err(Error::size(format!("conv1d input must be [N,C,T] or [C,T], got {shape:?}"))),
        };
        let k4 = kernels.reshape(&[ks[0], ks[1], 1, ks[2]])?;
        let y = x4.conv2d(k4, padding)?;
        let ys = y.shape();
        if unbatched {
            y.reshape(&[ys[1], ys[3]])
        } else {
            y.reshape(&[ys[0], ys[1], ys[3]])
        }
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (shape, map) = reduction_map(x.shape(), axes)?;
        let mut out = vec![0.0; shape.iter().product()];
        for (&v, &o) in x.data().iter().zip(&map) {
            out[o] += v;
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.derived(out, Op::Sum { x: self.id, map: Rc::new(map) }, self.requires_grad()))
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (shape, map) = reduction_map(x.shape(), axes)?;
        let out_len: usize = shape.iter().product();
        let count = x.len() / out_len;
        let mut out = vec![0.0; out_len];
        for (&v, &o) in x.data().iter().zip(&map) {
            out[o] += v;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.derived(out, Op::Mean { x: self.id, map: Rc::new(map), count }, self.requires_grad()))
    }

    /// Maximum over `axes`; the gradient flows to the first maximal element.
    pub fn max(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (shape, map) = reduction_map(x.shape(), axes)?;
        let out_len: usize = shape.iter().product();
        let mut best = vec![f64::NEG_INFINITY; out_len];
        let mut argmax = vec![usize::MAX; out_len];
        for (i, (&v, &o)) in x.data().iter().zip(&map).enumerate() {
            if argmax[o] == usize::MAX || v > best[o] {
                best[o] = v;
                argmax[o] = i;
            }
        }
        let out = Tensor::from_vec(&shape, best)?;
        Ok(self.derived(out, Op::Max { x: self.id, argmax }, self.requires_grad()))
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes).expect("all axes valid")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes).expect("all axes valid")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::size(format!("upsample2x needs rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = x.len() / (h * w);
        let mut data = vec![0.0; x.len() * 4];
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    data[(p * 2 * h + i) * 2 * w + j] = x.data()[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.derived(out, Op::Upsample2x(self.id), self.requires_grad()))
    }

    /// 2x2 average pooling of the last two axes, which must be even.
    pub fn avgpool2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || !s[s.len() - 2].is_multiple_of(2) || !s[s.len() - 1].is_multiple_of(2) {
            return Err(Error::size(format!("avgpool2x needs even trailing dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = x.len() / (h * w);
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    data[(p * ho + i / 2) * wo + j / 2] += 0.25 * x.data()[(p * h + i) * w + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.derived(out, Op::AvgPool2x(self.id), self.requires_grad()))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Axis(format!("axis {axis} out of range for rank {}", x.rank())));
        }
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        if len == 0 || start + len > dim {
            return Err(Error::size(format!("narrow {start}..{} of axis size {dim}", start + len)));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.derived(out, Op::Narrow { x: self.id, axis, start }, self.requires_grad()))
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || x.rank() < 2 {
            return Err(Error::Axis(format!("cannot select axis {axis} of rank {}", x.rank())));
        }
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        if index >= dim {
            return Err(Error::Index(format!("index {index} out of range {dim}")));
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * dim + index) * inner..(o * dim + index + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.derived(out, Op::Select { x: self.id, axis, index }, self.requires_grad()))
    }

    pub fn reverse(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Axis(format!("axis {axis} out of range for rank {}", x.rank())));
        }
        let (outer, dim, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(x.len());
        for o in 0..outer {
            for j in (0..dim).rev() {
                data.extend_from_slice(&x.data()[(o * dim + j) * inner..(o * dim + j + 1) * inner]);
            }
        }
        let out = Tensor::from_vec(x.shape(), data)?;
        Ok(self.derived(out, Op::Reverse { x: self.id, axis }, self.requires_grad()))
    }

    /// Transposes the last two axes.
    pub fn swap_last2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::size(format!("swap_last2 needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = x.len() / (r * c);
        let mut data = vec![0.0; x.len()];
        for p in 0..planes {
            for i in 0..r {
                for j in 0..c {
                    data[p * r * c + j * r + i] = x.data()[p * r * c + i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.derived(out, Op::SwapLast2(self.id), self.requires_grad()))
    }

    /// Inserts a new axis of size `size` at `axis`, replicating values along it.
    pub fn expand_axis(self, axis: usize, size: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis > x.rank() || size == 0 {
            return Err(Error::Axis(format!("cannot expand axis {axis} (size {size}) of rank {}", x.rank())));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(x.len() * size);
        for o in 0..outer {
            let chunk = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..size {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, size);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.derived(out, Op::ExpandAxis { x: self.id, axis }, self.requires_grad()))
    }

    /// Mean over rows of `-log softmax(logits)[label]` for `[n, K]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::size(format!(
                "cross entropy of logits {:?} against {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index(format!("label {label} out of range for {k} classes")));
            }
            let row = &x.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.derived(
            out,
            Op::CrossEntropy { logits: self.id, labels: Rc::new(labels.to_vec()), probs },
            self.requires_grad(),
        ))
    }

    /// Batch normalization over the last axis.
    ///
    /// With `stats = None` the batch mean and biased variance are used;
    /// otherwise the given `(mean, var)` pair.
    pub fn batchnorm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        self.tape.same_tape(gamma);
        self.tape.same_tape(beta);
        let x = self.value();
        let d = *x.shape().last().expect("nonempty shape");
        let m = x.len() / d;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != d || bv.len() != d {
            return Err(Error::size(format!(
                "batchnorm over {d} features with gamma/beta of {} / {}",
                gv.len(),
                bv.len()
            )));
        }
        let (mean, var) = match stats {
            Some((mu, var)) => (mu.to_vec(), var.to_vec()),
            None => {
                if m < 2 {
                    return Err(Error::Batch(format!("batch statistics need at least 2 rows, got {m}")));
                }
                let mut mean = vec![0.0; d];
                for r in 0..m {
                    for c in 0..d {
                        mean[c] += x.data()[r * d + c];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; d];
                for r in 0..m {
                    for c in 0..d {
                        let e = x.data()[r * d + c] - mean[c];
                        var[c] += e * e;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for r in 0..m {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (x.data()[i] - mean[c]) * inv_std[c];
                out[i] = gv.data()[c] * xhat[i] + bv.data()[c];
            }
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let var_out = self.derived(
            out,
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, batch_stats: stats.is_none() },
            rg,
        );
        Ok((var_out, mean, var))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::size("concat of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts
        .iter()
        .map(|p| {
            tape.same_tape(*p);
            p.value()
        })
        .collect();
    let base = values[0].shape();
    if axis >= base.len() {
        return Err(Error::Axis(format!("axis {axis} out of range for rank {}", base.len())));
    }
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(Error::size(format!("concat of {base:?} and {s:?} along axis {axis}")));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    let out = Tensor::from_vec(&shape, data)?;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg))
}

/// Stacks equal-shaped tensors along a new axis.
pub fn stack<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::size("stack of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts
        .iter()
        .map(|p| {
            tape.same_tape(*p);
            p.value()
        })
        .collect();
    let base = values[0].shape();
    if axis > base.len() {
        return Err(Error::Axis(format!("stack axis {axis} out of range for rank {}", base.len())));
    }
    if let Some(v) = values.iter().find(|v| v.shape() != base) {
        return Err(Error::size(format!("stack of {base:?} and {:?}", v.shape())));
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis..].iter().product();
    let mut data = Vec::with_capacity(outer * inner * values.len());
    for o in 0..outer {
        for v in &values {
            data.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
        }
    }
    let mut shape = base.to_vec();
    shape.insert(axis, values.len());
    let out = Tensor::from_vec(&shape, data)?;
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(out, Op::Stack { parts: parts.iter().map(|p| p.id).collect(), axis }, rg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let ones = tape.constant(Tensor::ones(&[3]));
        let zeros = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(x.mul(ones).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(x.mul(zeros).unwrap().value().data(), &[0.0, 0.0, 0.0]);
        let z = tape.constant(Tensor::zeros(&[1]));
        assert_eq!(z.exp().value().data(), &[1.0]);
    }

    #[test]
    fn elementwise_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::ones(&[2]));
        assert!(matches!(a.add(b), Err(Error::Size(_))));
        let z = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(z.log(), Err(Error::Domain(_))));
        assert!(matches!(a.div(z), Err(Error::Domain(_))));
    }

    #[test]
    fn matmul_hand_computed() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
        assert!(matches!(b.matmul(b), Err(Error::Size(_))));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn linear_gradient_is_constant() {
        let tape = Tape::new();
        let c = tape.constant(t(&[3], &[0.5, -2.0, 4.0]));
        let x = tape.leaf(t(&[3], &[1.0, 1.0, 1.0]), true);
        let loss = c.mul(x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, -2.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_reduce_hand_computed() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        assert_eq!(x.mean(&[0]).unwrap().value().data(), &[3.0, 5.0]);
        let z = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(z.sum_all().value().item(), 0.0);
        assert!(matches!(x.sum(&[2]), Err(Error::Axis(_))));
    }

    #[test]
    fn max_ties_route_to_first() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, 5.0, 5.0, 0.0]), true);
        let m = x.max(&[0]).unwrap();
        assert_eq!(m.value().item(), 5.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_definition() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.upsample2x().unwrap();
        assert_eq!(y.shape(), vec![1, 4, 4]);
        assert_eq!(y.value().data(), &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn upsample_gradient_sums_four() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[1.0, 2.0]), true);
        let w = tape.constant(t(&[1, 2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let loss = x.upsample2x().unwrap().mul(w).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1. + 2. + 5. + 6., 3. + 4. + 7. + 8.]);
    }

    #[test]
    fn axis_ops_shapes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(x.narrow(1, 1, 2).unwrap().value().data(), &[2., 3., 5., 6.]);
        assert_eq!(x.select(1, 2).unwrap().value().data(), &[3., 6.]);
        assert_eq!(x.reverse(1).unwrap().value().data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(x.swap_last2().unwrap().value().data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(x.expand_axis(1, 2).unwrap().value().data(), &[1., 2., 3., 1., 2., 3., 4., 5., 6., 4., 5., 6.]);
        let c = concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 6]);
        assert_eq!(c.value().data(), &[1., 2., 3., 1., 2., 3., 4., 5., 6., 4., 5., 6.]);
        let s = stack(&[x, x], 0).unwrap();
        assert_eq!(s.shape(), vec![2, 2, 3]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::ones(&[2, 2]), false);
        let x = tape.leaf(Tensor::ones(&[1, 2]), true);
        let loss = x.matmul(w).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn multiply_by_one_is_bitwise_identity() {
        let tape = Tape::new();
        let vals = [1e-300, -3.7, f64::MAX, 0.1 + 0.2, -0.0];
        let x = tape.constant(t(&[5], &vals));
        let y = x.mul(tape.constant(Tensor::ones(&[5]))).unwrap();
        for (a, b) in vals.iter().zip(y.value().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.3, 0.3]));
        let loss = l.cross_entropy(&[1]).unwrap().value().item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let l = tape.constant(t(&[1, 2], &[20.0, 0.0]));
        assert!(l.cross_entropy(&[0]).unwrap().value().item() < 1e-8);
        assert!(matches!(l.cross_entropy(&[2]), Err(Error::Index(_))));
    }

    #[test]
    fn embedding_gradient_is_histogram() {
        let tape = Tape::new();
        let table = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let e = tape.embedding(table, &[0, 0, 2], &[3]).unwrap();
        assert_eq!(e.value().data(), &[1., 2., 1., 2., 5., 6.]);
        let g = tape.backward(e.sum_all()).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[2., 2., 0., 0., 1., 1.]);
        assert!(matches!(tape.embedding(table, &[3], &[1]), Err(Error::Index(_))));
    }
}

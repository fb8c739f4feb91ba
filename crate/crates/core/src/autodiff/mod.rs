//! Reverse-mode automatic differentiation over small dense arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid reverse topological order because nodes can only refer to earlier
//! ones. Trainable values live in a [`ParamStore`]; a graph borrows copies of
//! them through [`Graph::param`] and the store pulls gradients back with
//! [`ParamStore::accumulate_grads`].

mod array;
pub mod checkpoint;
mod params;

use std::collections::BTreeMap;

use thiserror::Error;

pub use array::Array;
pub(crate) use array::gemm;
pub use params::{adam_step, AdamConfig, Param, ParamStore};

/// Additive value used for masked attention logits.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grads before running it again")]
    BackwardTwice,
    #[error("parameter `{0}` not found")]
    UnknownParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("parameter `{name}` has a non-finite gradient")]
    NonFiniteGrad { name: String },
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, s: f64 },
    Transpose { a: Var },
    ConcatLast { parts: Vec<Var> },
    SliceLast { a: Var, offset: usize },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu { a: Var, tanh: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Square { a: Var },
    Sqrt { a: Var },
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, value: Array, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A differentiable input that is not owned by a parameter store.
    pub fn input(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Binds a stored parameter into the graph. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf, true, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// `a · b` (or `a · bᵀ` for [`Graph::matmul_bt`]). `a` may be rank 2 or 3;
    /// leading axes are flattened into rows. `b` must be rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 2 || bv.rank() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let k = av.last_dim();
        let m = av.rows();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Array::zeros(&shape);
        let bs = if trans_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, av.data(), (k, 1), bv.data(), bs, 0.0, out.data_mut());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, trans_b }, rg, "matmul")
    }

    fn broadcast_ok(a: &Array, b: &Array) -> Option<bool> {
        if a.shape() == b.shape() {
            Some(false)
        } else if b.rank() == 1 && b.len() == a.last_dim() && a.rank() >= 1 {
            Some(true)
        } else {
            None
        }
    }

    /// Elementwise sum. `b` may also be a vector broadcast along the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = Self::broadcast_ok(av, bv)
            .ok_or_else(|| shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())))?;
        let mut out = av.clone();
        let d = bv.len().max(1);
        let chunk = if broadcast { d } else { out.len().max(1) };
        for row in out.data_mut().chunks_mut(chunk) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b, broadcast }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", format!("{:?} - {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        for (o, b) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= b;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub { a, b }, rg, "sub")
    }

    /// Elementwise product, with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = Self::broadcast_ok(av, bv)
            .ok_or_else(|| shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())))?;
        let mut out = av.clone();
        let d = bv.len().max(1);
        let chunk = if broadcast { d } else { out.len().max(1) };
        for row in out.data_mut().chunks_mut(chunk) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b, broadcast }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, s }, rg, "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = Array::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = av.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Transpose { a }, rg, "transpose")
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_last_dim", "no inputs".to_string()))?;
        let lead = self.value(*first).shape()[..self.value(*first).rank() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() == 0 || v.shape()[..v.rank() - 1] != lead[..] {
                return Err(shape_err(
                    "concat_last_dim",
                    format!("{:?} vs leading {lead:?}", v.shape()),
                ));
            }
            width += v.last_dim();
        }
        let rows = self.value(*first).rows();
        let mut shape = lead.clone();
        shape.push(width);
        let mut out = Array::zeros(&shape);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let w = v.last_dim();
            for r in 0..rows {
                out.data_mut()[r * width + offset..r * width + offset + w]
                    .copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatLast { parts: parts.to_vec() }, rg, "concat_last_dim")
    }

    /// Columns `offset..offset + width` of the last axis.
    pub fn slice_last_dim(&mut self, a: Var, offset: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.rank() == 0 || offset + width > d {
            return Err(shape_err(
                "slice_last_dim",
                format!("{:?}[.., {offset}..{}]", av.shape(), offset + width),
            ));
        }
        let rows = av.rows();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[offset..offset + width]);
        }
        let out = Array::from_vec(&shape, data)?;
        let rg = self.rg(a);
        self.push(out, Op::SliceLast { a, offset }, rg, "slice_last_dim")
    }

    /// Splits the last axis into `parts` equal chunks.
    pub fn split_last_dim(&mut self, a: Var, parts: usize) -> Result<Vec<Var>> {
        let d = self.value(a).last_dim();
        if parts == 0 || d % parts != 0 {
            return Err(shape_err(
                "split_last_dim",
                format!("last axis {d} into {parts} parts"),
            ));
        }
        let w = d / parts;
        (0..parts).map(|i| self.slice_last_dim(a, i * w, w)).collect()
    }

    /// Softmax over the last axis of `a + mask`. The mask is a constant of the
    /// same shape, typically 0 or [`MASK_NEG`]. A row whose entries are all
    /// masked comes out uniform.
    pub fn softmax_last_dim(&mut self, a: Var, mask: Option<&Array>) -> Result<Var> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.shape() != av.shape() {
                return Err(shape_err(
                    "softmax_last_dim",
                    format!("mask {:?} for input {:?}", m.shape(), av.shape()),
                ));
            }
        }
        let d = av.last_dim();
        let mut out = av.clone();
        if let Some(m) = mask {
            for (o, mv) in out.data_mut().iter_mut().zip(m.data()) {
                *o += mv;
            }
        }
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                let z = *v - max;
                // exp underflows to exactly 0 below this
                *v = if z < -746.0 { 0.0 } else { z.exp() };
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax { a }, rg, "softmax_last_dim")
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// with the variance floored by `eps`. No affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { a, inv_std }, rg, "layer_norm")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut tanh = Vec::with_capacity(out.len());
        for v in out.data_mut() {
            let x = *v;
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            *v = 0.5 * x * (1.0 + t);
            tanh.push(t);
        }
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a, tanh }, rg, "gelu")
    }

    /// Rows of a rank-2 `table` selected by `indices`, shape `[len, d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err("embedding_lookup", format!("table {:?}", tv.shape())));
        }
        let rows = tv.shape()[0];
        let d = tv.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Array::from_vec(&[indices.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "embedding_lookup",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::Sum { a }, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(shape_err("mean", "empty input".to_string()));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::Mean { a }, rg, "mean")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        let rg = self.rg(a);
        self.push(out, Op::Square { a }, rg, "square")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.sqrt());
        let rg = self.rg(a);
        self.push(out, Op::Sqrt { a }, rg, "sqrt")
    }

    /// `x · w + b` for a rank-2 weight and a bias vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn acc(&mut self, v: Var, g: Array) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn with_grad_slot<F: FnOnce(&Self, &mut Array)>(&mut self, v: Var, f: F) {
        let mut slot = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| Array::zeros(self.nodes[v.0].value.shape()));
        f(self, &mut slot);
        self.nodes[v.0].grad = Some(slot);
    }

    fn grad_slot(&mut self, v: Var) -> &mut Array {
        let node = &mut self.nodes[v.0];
        node.grad
            .get_or_insert_with(|| Array::zeros(node.value.shape()))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let shape = lv.shape().to_vec();
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Array::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.backprop_node(idx, &g)?;
            self.nodes[idx].grad = Some(g);
        }
        if self.nodes.iter().any(|n| n.grad.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(AutodiffError::NonFinite { op: "backward" });
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &Array) -> Result<()> {
        // Take the op out temporarily so that child gradients can be written
        // while reading op metadata.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.backprop_op(idx, &op, g);
        self.nodes[idx].op = op;
        result
    }

    fn backprop_op(&mut self, idx: usize, op: &Op, g: &Array) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let k = self.value(a).last_dim();
                let m = self.value(a).rows();
                let n = g.last_dim();
                if self.rg(a) {
                    // dA[m,k] += G[m,n] · B'ᵀ where B' is b as used forward.
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    self.with_grad_slot(a, |s, slot| {
                        gemm(m, n, k, g.data(), (n, 1), s.value(b).data(), bs, 1.0, slot.data_mut());
                    });
                }
                if self.rg(b) {
                    self.with_grad_slot(b, |s, slot| {
                        let adata = s.value(a).data();
                        if trans_b {
                            // dB[n,k] += Gᵀ[n,m] · A[m,k]
                            gemm(n, m, k, g.data(), (1, n), adata, (k, 1), 1.0, slot.data_mut());
                        } else {
                            // dB[k,n] += Aᵀ[k,m] · G[m,n]
                            gemm(k, m, n, adata, (1, k), g.data(), (n, 1), 1.0, slot.data_mut());
                        }
                    });
                }
            }
            Op::Add { a, b, broadcast } => {
                self.acc(a, g.clone());
                if self.rg(b) {
                    self.acc(b, reduce_broadcast(g, broadcast, self.value(b).shape()));
                }
            }
            Op::Sub { a, b } => {
                self.acc(a, g.clone());
                if self.rg(b) {
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                    self.acc(b, neg);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let d = self.value(b).len();
                if self.rg(a) {
                    let bv = self.value(b);
                    let mut ga = g.clone();
                    let chunk = if broadcast { d.max(1) } else { ga.len().max(1) };
                    for row in ga.data_mut().chunks_mut(chunk) {
                        for (v, b) in row.iter_mut().zip(bv.data()) {
                            *v *= b;
                        }
                    }
                    self.acc(a, ga);
                }
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(b) {
                    let mut prod = g.clone();
                    for (v, x) in prod.data_mut().iter_mut().zip(av.data()) {
                        *v *= x;
                    }
                    let gb = reduce_broadcast(&prod, broadcast, bv.shape());
                    self.acc(b, gb);
                }
            }
            Op::Scale { a, s } => {
                let mut ga = g.clone();
                ga.data_mut().iter_mut().for_each(|v| *v *= s);
                self.acc(a, ga);
            }
            Op::Transpose { a } => {
                let (r, c) = (g.shape()[1], g.shape()[0]);
                let mut ga = Array::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = g.data()[j * r + i];
                    }
                }
                self.acc(a, ga);
            }
            Op::ConcatLast { ref parts } => {
                let width = g.last_dim();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let shape = self.value(p).shape().to_vec();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * width + offset..r * width + offset + w]);
                        }
                        self.acc(p, Array::from_vec(&shape, data)?);
                    }
                    offset += w;
                }
            }
            Op::SliceLast { a, offset } => {
                let w = g.last_dim();
                let d = self.value(a).last_dim();
                let rows = g.rows();
                let slot = self.grad_slot(a);
                for r in 0..rows {
                    let dst = &mut slot.data_mut()[r * d + offset..r * d + offset + w];
                    for (x, y) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                        *x += y;
                    }
                }
            }
            Op::Softmax { a } => {
                let y = &self.nodes[idx].value;
                let d = y.last_dim().max(1);
                let mut ga = Array::zeros(y.shape());
                for ((gy, yy), out) in g
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(ga.data_mut().chunks_mut(d))
                {
                    let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in out.iter_mut().zip(gy).zip(yy) {
                        *o = q * (p - dot);
                    }
                }
                self.acc(a, ga);
            }
            Op::LayerNorm { a, ref inv_std } => {
                let y = &self.nodes[idx].value;
                let d = y.last_dim().max(1);
                let mut ga = Array::zeros(y.shape());
                for (r, ((gy, yy), out)) in g
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(ga.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let mg = gy.iter().sum::<f64>() / d as f64;
                    let mgy = gy.iter().zip(yy).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for ((o, p), q) in out.iter_mut().zip(gy).zip(yy) {
                        *o = inv_std[r] * (p - mg - q * mgy);
                    }
                }
                self.acc(a, ga);
            }
            Op::Gelu { a, ref tanh } => {
                let x = self.value(a);
                let mut ga = g.clone();
                for ((v, &x), &t) in ga.data_mut().iter_mut().zip(x.data()).zip(tanh) {
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *v *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                }
                self.acc(a, ga);
            }
            Op::Gather { table, ref indices } => {
                let d = g.last_dim();
                let slot = self.grad_slot(table);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut slot.data_mut()[i * d..(i + 1) * d];
                    for (x, y) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *x += y;
                    }
                }
            }
            Op::Sum { a } => {
                let shape = self.value(a).shape().to_vec();
                self.acc(a, Array::full(&shape, g.item()));
            }
            Op::Mean { a } => {
                let shape = self.value(a).shape().to_vec();
                let n = self.value(a).len() as f64;
                self.acc(a, Array::full(&shape, g.item() / n));
            }
            Op::Square { a } => {
                let mut ga = g.clone();
                for (v, x) in ga.data_mut().iter_mut().zip(self.value(a).data()) {
                    *v *= 2.0 * x;
                }
                self.acc(a, ga);
            }
            Op::Sqrt { a } => {
                let y = &self.nodes[idx].value;
                let mut ga = g.clone();
                for (v, s) in ga.data_mut().iter_mut().zip(y.data()) {
                    // sqrt is not differentiable at 0; use the zero subgradient.
                    *v = if *s > 0.0 { *v / (2.0 * s) } else { 0.0 };
                }
                self.acc(a, ga);
            }
        }
        Ok(())
    }
}

fn reduce_broadcast(g: &Array, broadcast: bool, target: &[usize]) -> Array {
    if !broadcast {
        return g.clone();
    }
    let d = target[0];
    let mut out = Array::zeros(target);
    for row in g.data().chunks(d) {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests;

//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied during a forward pass as a
//! node holding its output value. [`Tape::backward`] then walks the nodes in
//! reverse, accumulating gradients for parameter and input leaves. Nodes are
//! appended in evaluation order, so the graph is acyclic by construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use super::{Matrix, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Variance floor for layer and instance normalization.
pub const NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddColBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Repatch { x: Var, group: usize },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    Sum(Var),
    SumSquares(Var),
    /// Loss node whose local gradient w.r.t. `x` was computed in forward.
    Loss { x: Var, local: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Matrix>,
    inputs: BTreeMap<Var, Matrix>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Matrix> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Parameters that received a gradient with at least one nonzero entry.
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .filter(|(_, g)| g.data().iter().any(|v| *v != 0.0))
            .map(|(k, _)| *k)
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    frozen: HashSet<ParamGroup>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `group` enter subsequent graphs as constants.
    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = if self.frozen.contains(&store.group(id)) {
            self.push_arc(store.arc(id), Op::Constant, false)
        } else {
            self.push_arc(store.arc(id), Op::Param(id), true)
        };
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// Adds a `rows x 1` bias to every column of `a`.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.cols() != 1 || b.rows() != x.rows() {
            return Err(Error::Shape {
                op: "add_col_bias",
                left: x.shape(),
                right: b.shape(),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let bv = b.data()[r];
            for v in out.row_mut(r) {
                *v += bv;
            }
        }
        let g = self.grad_flag(&[a, bias]);
        Ok(self.push(out, Op::AddColBias(a, bias), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let g = self.grad_flag(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let g = self.grad_flag(&[a]);
        self.push(out, Op::Transpose(a), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, end)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(out, Op::SliceCols { x: a, start }, g))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let g = self.grad_flag(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Groups `group` consecutive columns into one, zero-padding at the end.
    pub fn repatch(&mut self, a: Var, group: usize) -> Result<Var> {
        let out = crate::patching::repatch(self.value(a), group)?;
        let g = self.grad_flag(&[a]);
        Ok(self.push(out, Op::Repatch { x: a, group }, g))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let g = self.grad_flag(&[a]);
        self.push(out, Op::Gelu(a), g)
    }

    /// Normalizes each column over its rows, then applies per-row gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xm = self.value(x);
        let (d, p) = xm.shape();
        for v in [gain, bias] {
            if self.shape(v) != (d, 1) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: (d, p),
                    right: self.shape(v),
                });
            }
        }
        let mut xhat = Matrix::zeros(d, p);
        let mut inv_std = Vec::with_capacity(p);
        for c in 0..p {
            let mean = (0..d).map(|r| xm.get(r, c)).sum::<f64>() / d as f64;
            let var = (0..d).map(|r| (xm.get(r, c) - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for r in 0..d {
                xhat.set(r, c, (xm.get(r, c) - mean) * inv);
            }
            inv_std.push(inv);
        }
        let (gm, bm) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..d {
            let (gv, bv) = (gm.data()[r], bm.data()[r]);
            for v in out.row_mut(r) {
                *v = gv * *v + bv;
            }
        }
        let g = self.grad_flag(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Normalizes each row across its columns; a single column maps to zeros.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let xm = self.value(x);
        let (d, p) = xm.shape();
        if p == 0 {
            return Err(Error::Shape {
                op: "instance_norm",
                left: (d, p),
                right: (d, 1),
            });
        }
        let mut out = Matrix::zeros(d, p);
        let mut inv_std = Vec::with_capacity(d);
        for r in 0..d {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / p as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.grad_flag(&[x]);
        Ok(self.push(out, Op::InstanceNorm { x, inv_std }, g))
    }

    /// Column-wise softmax of `x / temperature`. Rows flagged in `row_mask`
    /// get zero weight; a column with every row masked becomes all zeros.
    pub fn softmax_columns(
        &mut self,
        x: Var,
        temperature: f64,
        row_mask: Option<&[bool]>,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        if let Some(mask) = row_mask {
            if mask.len() != rows {
                return Err(Error::Shape {
                    op: "softmax mask",
                    left: (rows, cols),
                    right: (mask.len(), 1),
                });
            }
        }
        let masked = |r: usize| row_mask.is_some_and(|m| m[r]);
        let mut out = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let mut max = f64::NEG_INFINITY;
            for r in (0..rows).filter(|&r| !masked(r)) {
                max = max.max(xm.get(r, c) / temperature);
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for r in (0..rows).filter(|&r| !masked(r)) {
                let e = (xm.get(r, c) / temperature - max).exp();
                out.set(r, c, e);
                total += e;
            }
            for r in 0..rows {
                out.set(r, c, out.get(r, c) / total);
            }
        }
        let g = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Softmax { x, temperature }, g))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let g = self.grad_flag(&[x]);
        self.push(out, Op::Sum(x), g)
    }

    /// Sum of squared entries, as a `1 x 1` node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum_squares());
        let g = self.grad_flag(&[x]);
        self.push(out, Op::SumSquares(x), g)
    }

    /// Weighted squared error `sum w * (pred - target)^2`. Missing weights
    /// mean all ones.
    pub fn weighted_sse(
        &mut self,
        pred: Var,
        target: &Matrix,
        weight: Option<&Matrix>,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weight.is_some_and(|w| w.shape() != p.shape()) {
            return Err(Error::Shape {
                op: "weighted_sse",
                left: p.shape(),
                right: target.shape(),
            });
        }
        let mut local = Matrix::zeros(p.rows(), p.cols());
        let mut loss = 0.0;
        for i in 0..p.len() {
            let w = weight.map_or(1.0, |w| w.data()[i]);
            let diff = p.data()[i] - target.data()[i];
            loss += w * diff * diff;
            local.data_mut()[i] = 2.0 * w * diff;
        }
        let g = self.grad_flag(&[pred]);
        Ok(self.push(Matrix::scalar(loss), Op::Loss { x: pred, local }, g))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&mut self, pred: Var, target: &Matrix) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.is_empty() {
            return Err(Error::Shape {
                op: "l1_mean",
                left: p.shape(),
                right: target.shape(),
            });
        }
        let n = p.len() as f64;
        let mut local = Matrix::zeros(p.rows(), p.cols());
        let mut loss = 0.0;
        for i in 0..p.len() {
            let diff = p.data()[i] - target.data()[i];
            loss += diff.abs();
            local.data_mut()[i] = if diff > 0.0 {
                1.0 / n
            } else if diff < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
        let g = self.grad_flag(&[pred]);
        Ok(self.push(Matrix::scalar(loss / n), Op::Loss { x: pred, local }, g))
    }

    /// Cross-entropy of a `classes x 1` logit column against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 || label >= z.rows() {
            return Err(Error::Index {
                what: "class label",
                index: label,
                min: 0,
                max: z.rows().saturating_sub(1),
            });
        }
        let probs = softmax_vec(z.data());
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut local = Matrix::column(probs);
        local.data_mut()[label] -= 1.0;
        let g = self.grad_flag(&[logits]);
        Ok(self.push(Matrix::scalar(loss), Op::Loss { x: logits, local }, g))
    }

    /// Adds a list of `1 x 1` nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Matrix::scalar(0.0)));
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Propagates d(loss)/d(node) back to every leaf that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(loss),
                right: (1, 1),
            });
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(idx), g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddColBias(a, bias) => {
                    if self.nodes[bias.0].needs_grad {
                        let gb = Matrix::column((0..g.rows()).map(|r| g.row(r).iter().sum()).collect());
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scaled(*s)),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dst = &mut gx.row_mut(r)[*start..*start + g.cols()];
                        dst.copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.nodes[p.0].needs_grad {
                            let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(rows, cols, data)?);
                        }
                        offset += rows;
                    }
                }
                Op::Repatch { x, group } => {
                    let (d, p) = self.shape(*x);
                    let mut gx = Matrix::zeros(d, p);
                    for q in 0..g.cols() {
                        for j in 0..*group {
                            let src = q * group + j;
                            if src >= p {
                                break;
                            }
                            for c in 0..d {
                                gx.set(c, src, g.get(j * d + c, q));
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let xm = self.value(*a);
                    let mut gx = g;
                    for (gv, &x) in gx.data_mut().iter_mut().zip(xm.data()) {
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (d, p) = xhat.shape();
                    if self.nodes[gain.0].needs_grad {
                        let gg = (0..d)
                            .map(|r| (0..p).map(|c| g.get(r, c) * xhat.get(r, c)).sum())
                            .collect();
                        accumulate(&mut grads, *gain, Matrix::column(gg));
                    }
                    if self.nodes[bias.0].needs_grad {
                        let gb = (0..d).map(|r| g.row(r).iter().sum()).collect();
                        accumulate(&mut grads, *bias, Matrix::column(gb));
                    }
                    if self.nodes[x.0].needs_grad {
                        let gm = self.value(*gain);
                        let mut gx = Matrix::zeros(d, p);
                        for c in 0..p {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for r in 0..d {
                                let gh = g.get(r, c) * gm.data()[r];
                                mean_g += gh;
                                mean_gx += gh * xhat.get(r, c);
                            }
                            mean_g /= d as f64;
                            mean_gx /= d as f64;
                            for r in 0..d {
                                let gh = g.get(r, c) * gm.data()[r];
                                gx.set(
                                    r,
                                    c,
                                    inv_std[c] * (gh - mean_g - xhat.get(r, c) * mean_gx),
                                );
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = &node.value;
                    let (d, p) = y.shape();
                    let mut gx = Matrix::zeros(d, p);
                    for r in 0..d {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mean_g = gr.iter().sum::<f64>() / p as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / p as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax { x, temperature } => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for c in 0..cols {
                        let inner: f64 = (0..rows).map(|r| g.get(r, c) * y.get(r, c)).sum();
                        for r in 0..rows {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - inner) / temperature);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (rows, cols) = self.shape(*x);
                    accumulate(&mut grads, *x, Matrix::filled(rows, cols, g.item()));
                }
                Op::SumSquares(x) => {
                    let gx = self.value(*x).scaled(2.0 * g.item());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Loss { x, local } => {
                    accumulate(&mut grads, *x, local.scaled(g.item()));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_equal_column_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(4, 1, 2.5));
        let y = t.softmax_columns(x, 1.0, None).unwrap();
        assert!(t.value(y).data().iter().all(|v| close(*v, 0.25, 1e-15)));
    }

    #[test]
    fn softmax_closed_form_two_entries() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![0.0, 3f64.ln()]));
        let y = t.softmax_columns(x, 1.0, None).unwrap();
        assert!(close(t.value(y).data()[0], 0.25, 1e-15));
        assert!(close(t.value(y).data()[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = Matrix::from_rows(&[[0.3, -1.0], [1.7, 0.2], [-0.4, 2.2]]).unwrap();
        let shifted = base.map(|v| v + 100.0);
        let mut t = Tape::new();
        let a = t.constant(base);
        let b = t.constant(shifted);
        let ya = t.softmax_columns(a, 0.7, None).unwrap();
        let yb = t.softmax_columns(b, 0.7, None).unwrap();
        for (u, v) in t.value(ya).data().iter().zip(t.value(yb).data()) {
            assert!(close(*u, *v, 1e-12));
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(2, 2));
        assert!(t.softmax_columns(x, 0.0, None).is_err());
    }

    #[test]
    fn softmax_masked_rows_get_zero_weight() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1.0], [5.0], [2.0]]).unwrap());
        let y = t.softmax_columns(x, 1.0, Some(&[false, true, false])).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!(close(v[0] + v[2], 1.0, 1e-15));
    }

    #[test]
    fn layer_norm_constant_column_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(3, 2, 4.2));
        let g = t.constant(Matrix::filled(3, 1, 1.0));
        let b = t.constant(Matrix::zeros(3, 1));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![1.0, 3.0]));
        let g = t.constant(Matrix::filled(2, 1, 1.0));
        let b = t.constant(Matrix::zeros(2, 1));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(close(t.value(y).data()[0], -1.0, 1e-4));
        assert!(close(t.value(y).data()[1], 1.0, 1e-4));
    }

    #[test]
    fn instance_norm_single_patch_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![1.0, -2.0, 7.0]));
        let y = t.instance_norm(x).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn instance_norm_row() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[2.0, 4.0, 6.0]]).unwrap());
        let y = t.instance_norm(x).unwrap();
        let v = t.value(y).data();
        assert!(close(v[0], -1.2247, 1e-3));
        assert!(close(v[1], 0.0, 1e-12));
        assert!(close(v[2], 1.2247, 1e-3));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(5, 1));
        let l = t.cross_entropy(z, 2).unwrap();
        assert!(close(t.value(l).item(), 5f64.ln(), 1e-14));
        assert!(t.cross_entropy(z, 5).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", ParamGroup::Backbone, Matrix::filled(1, 1, 3.0))
            .unwrap();
        let h = store
            .insert("h", ParamGroup::Head, Matrix::filled(1, 1, 2.0))
            .unwrap();
        let mut t = Tape::new();
        t.freeze(ParamGroup::Backbone);
        let wv = t.param(&store, w);
        let hv = t.param(&store, h);
        let p = t.matmul(wv, hv).unwrap();
        let loss = t.sum_squares(p);
        let g = t.backward(loss).unwrap();
        assert!(g.param(w).is_none());
        // d/dh (w h)^2 = 2 w^2 h = 36
        assert_eq!(g.param(h).unwrap().item(), 36.0);
    }
}

//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value plus whatever the backward rule needs. [`Tape::backward`] walks
//! the nodes once in reverse order. Nodes are appended only after their
//! inputs, so the tape is topologically sorted by construction.
//!
//! Parameters are read from a borrowed [`ParamStore`]; their gradients are
//! returned in a [`Gradients`] map keyed by [`ParamId`]. Frozen parameters
//! enter the tape as constants.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Lookup { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    MeanPool { x: Var, axis: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    TopKRenorm { x: Var, keep: Vec<usize>, total: f64 },
    Element { x: Var, index: usize },
    Bce { p: Var, labels: Vec<f64> },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-operation record of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    inputs: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient of a parameter, `None` if it did not influence the loss
    /// through any differentiable path (or is frozen).
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of an [`Tape::input`] variable.
    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    /// Adds `scale · other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (slot, g) in self.params.iter_mut().zip(&other.params) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => *slot = Some(g.map(|v| scale * v)),
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        [c] => Ok((1, c)),
        _ => Err(Error::shape(op, t.shape(), &[])),
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `data` viewed as `rows × cols`, in place. Entries where
/// `allowed` is false get exactly zero weight.
/// Spreads entry `(i, j)` of every head's `L × L` matrix over that head's
/// `dh` columns. Returns false when all heads are zero there.
fn head_weights(per_head: &[f64], l: usize, i: usize, j: usize, dh: usize, w: &mut [f64]) -> bool {
    let mut any = false;
    for (h, chunk) in w.chunks_mut(dh).enumerate() {
        let v = per_head[(h * l + i) * l + j];
        any |= v != 0.0;
        chunk.iter_mut().for_each(|c| *c = v);
    }
    any
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize, allowed: Option<&[bool]>) {
    for row in data.chunks_mut(cols) {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed.is_none_or(|a| a[j]) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed.is_none_or(|a| a[j]) {
                *v = libm::exp(*v - max);
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that receives a gradient, readable via [`Gradients::input`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Loads a parameter. Repeated loads of the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let trainable = self.params.is_trainable(id);
        let v = self.push(value, Op::Param(id), trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// Gathers rows of a 2-D parameter table; gradients scatter back into the
    /// selected rows only.
    pub fn embedding_lookup(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.params.get(table);
        let (rows, _) = dims2("embedding_lookup", t)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(alloc::format!(
                "embedding id {bad} out of range for `{}` with {rows} rows",
                self.params.name(table)
            )));
        }
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup needs at least one id"));
        }
        let value = t.select_rows(ids);
        let trainable = self.params.is_trainable(table);
        Ok(self.push(value, Op::Lookup { table, ids: ids.to_vec() }, trainable))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if av.shape().len() != 2 || bv.shape().len() != 2 || k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = dims2("transpose", xv)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `x[m×n] + bias[n]`, the bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.numel() != n {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| c * v);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    /// Multiplies a tensor by a one-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::shape("scale_by", self.value(x).shape(), sv.shape()));
        }
        let c = sv.item();
        let value = self.value(x).map(|v| c * v);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(value, Op::ScaleBy(x, s), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(libm::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    /// Softmax along the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        softmax_rows_in_place(&mut data, cols, None);
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns). 1-D
    /// tensors are treated as single rows.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat needs at least one part"));
        }
        let first = self.value(parts[0]);
        let (_, c0) = dims2("concat", first)?;
        let (r0, _) = dims2("concat", first)?;
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = dims2("concat", pv)?;
            match axis {
                0 if c == c0 => rows += r,
                1 if r == r0 => cols += c,
                0 | 1 => return Err(Error::shape("concat", first.shape(), pv.shape())),
                _ => return Err(Error::contract("concat axis must be 0 or 1")),
            }
        }
        let value = if axis == 0 {
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::from_parts(vec![rows, c0], data)
        } else {
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    data.extend_from_slice(&pv.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::from_parts(vec![r0, cols], data)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Mean over `axis` of a 2-D tensor, keeping the reduced axis with size 1.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = dims2("mean_pool", xv)?;
        let value = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in out.iter_mut().zip(&xv.data()[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::from_parts(vec![1, n], out)
            }
            1 => {
                let out = (0..m)
                    .map(|r| xv.data()[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor::from_parts(vec![m, 1], out)
            }
            _ => return Err(Error::contract("mean_pool axis must be 0 or 1")),
        };
        let ng = self.ng(x);
        Ok(self.push(value, Op::MeanPool { x, axis }, ng))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, _) = dims2("gather_rows", xv)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::contract("gather_rows index out of range"));
        }
        let value = xv.select_rows(rows);
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// Multi-head scaled dot-product attention over `L × d` projections.
    ///
    /// `mask[j] == false` hides key position `j` from every query. Attention
    /// weights are kept on the node; see [`Tape::attention_weights`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", qv, kv)?;
        same_shape("attention", qv, vv)?;
        let (l, d) = dims2("attention", qv)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract("model width must be divisible by the head count"));
        }
        if let Some(m) = mask {
            if m.len() != l {
                return Err(Error::shape("attention mask", &[l], &[m.len()]));
            }
            if !m.iter().any(|&a| a) {
                return Err(Error::contract("attention mask hides every position"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; heads * l * l];
        let mut prod = vec![0.0; d];
        for i in 0..l {
            let qi = &qd[i * d..(i + 1) * d];
            for j in 0..l {
                let kj = &kd[j * d..(j + 1) * d];
                for ((p, a), b) in prod.iter_mut().zip(qi).zip(kj) {
                    *p = a * b;
                }
                for (h, group) in prod.chunks(dh).enumerate() {
                    probs[(h * l + i) * l + j] = scale * group.iter().sum::<f64>();
                }
            }
        }
        for h in 0..heads {
            softmax_rows_in_place(&mut probs[h * l * l..(h + 1) * l * l], l, mask);
        }
        let mut out = vec![0.0; l * d];
        let mut w = vec![0.0; d];
        for i in 0..l {
            let oi = &mut out[i * d..(i + 1) * d];
            for j in 0..l {
                if !head_weights(&probs, l, i, j, dh, &mut w) {
                    continue;
                }
                for ((o, wc), vc) in oi.iter_mut().zip(&w).zip(&vd[j * d..(j + 1) * d]) {
                    *o += wc * vc;
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let value = Tensor::from_parts(vec![l, d], out);
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Attention weights of an [`Tape::attention`] node as `heads` matrices of
    /// `L × L`, row-major, concatenated.
    pub fn attention_weights(&self, node: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// Keeps only the entries at `keep` and rescales them to sum to one.
    pub fn topk_renorm(&mut self, x: Var, keep: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if keep.is_empty() || keep.iter().any(|&i| i >= xv.numel()) {
            return Err(Error::contract("top-k selection out of range"));
        }
        let total: f64 = keep.iter().map(|&i| xv.data()[i]).sum();
        if total <= 0.0 {
            return Err(Error::contract("top-k selection has zero mass"));
        }
        let mut data = vec![0.0; xv.numel()];
        for &i in keep {
            data[i] = xv.data()[i] / total;
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        Ok(self.push(value, Op::TopKRenorm { x, keep: keep.to_vec(), total }, ng))
    }

    /// One element (by flat index) as a one-element tensor.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if index >= xv.numel() {
            return Err(Error::contract("element index out of range"));
        }
        let value = Tensor::scalar(xv.data()[index]);
        let ng = self.ng(x);
        Ok(self.push(value, Op::Element { x, index }, ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != labels.len() {
            return Err(Error::shape("bce_loss", pv.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc))
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, labels: labels.to_vec() }, ng))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Runs the reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            params: vec![None; self.params.len()],
            inputs: Vec::new(),
        };

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let numel = |v: Var| self.nodes[v.0].value.numel();
            match &node.op {
                Op::Constant => {}
                Op::Input => out.inputs.push((Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g))),
                Op::Param(id) => {
                    let slot = &mut out.params[id.0];
                    match slot {
                        Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                    }
                }
                Op::Lookup { table, ids } => {
                    let tv = self.params.get(*table);
                    let d = tv.cols();
                    let slot = out.params[table.0].get_or_insert_with(|| Tensor::zeros(tv.shape()));
                    let data = slot.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            data[id * d + c] += g[r * d + c];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        matmul_bt_acc(&g, bv.data(), ga, m, n, k);
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, k * n);
                        matmul_at_acc(av.data(), &g, gb, m, k, n);
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                    let gx = acc(&mut grads, *x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            add_into(acc(&mut grads, v, g.len()), &g, 1.0);
                        }
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.ng(*x) {
                        add_into(acc(&mut grads, *x, g.len()), &g, 1.0);
                    }
                    if self.ng(*bias) {
                        let n = numel(*bias);
                        let gb = acc(&mut grads, *bias, n);
                        for row in g.chunks(n) {
                            add_into(gb, row, 1.0);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale(x, c) => add_into(acc(&mut grads, *x, g.len()), &g, *c),
                Op::AddScalar(x) => add_into(acc(&mut grads, *x, g.len()), &g, 1.0),
                Op::ScaleBy(x, s) => {
                    let c = self.value(*s).item();
                    if self.ng(*x) {
                        add_into(acc(&mut grads, *x, g.len()), &g, c);
                    }
                    if self.ng(*s) {
                        let xv = self.value(*x).data();
                        let ds: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                        acc(&mut grads, *s, 1)[0] += ds;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let gx = acc(&mut grads, *x, g.len());
                    for r in 0..g.len() / cols {
                        let range = r * cols..(r + 1) * cols;
                        let dot: f64 = g[range.clone()].iter().zip(&y[range.clone()]).map(|(a, b)| a * b).sum();
                        for i in range {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = node.value.cols();
                    let rows = g.len() / d;
                    let gv = self.value(*gain).data();
                    if self.ng(*gain) {
                        let gg = acc(&mut grads, *gain, d);
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if self.ng(*bias) {
                        let gb = acc(&mut grads, *bias, d);
                        for row in g.chunks(d) {
                            add_into(gb, row, 1.0);
                        }
                    }
                    if self.ng(*x) {
                        let gx = acc(&mut grads, *x, g.len());
                        let n = d as f64;
                        for r in 0..rows {
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                let dh = g[r * d + j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[r * d + j];
                            }
                            for j in 0..d {
                                let dh = g[r * d + j] * gv[j];
                                gx[r * d + j] += inv_std[r] / n
                                    * (n * dh - sum_dh - xhat[r * d + j] * sum_dh_h);
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for &p in parts {
                            let len = numel(p);
                            if self.ng(p) {
                                add_into(acc(&mut grads, p, len), &g[offset..offset + len], 1.0);
                            }
                            offset += len;
                        }
                    } else {
                        let total_cols = node.value.cols();
                        let rows = node.value.rows();
                        let mut col = 0;
                        for &p in parts {
                            let c = self.value(p).cols();
                            if self.ng(p) {
                                let gp = acc(&mut grads, p, rows * c);
                                for r in 0..rows {
                                    add_into(
                                        &mut gp[r * c..(r + 1) * c],
                                        &g[r * total_cols + col..r * total_cols + col + c],
                                        1.0,
                                    );
                                }
                            }
                            col += c;
                        }
                    }
                }
                Op::MeanPool { x, axis } => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let m = xv.numel() / n;
                    let gx = acc(&mut grads, *x, m * n);
                    if *axis == 0 {
                        for r in 0..m {
                            add_into(&mut gx[r * n..(r + 1) * n], &g, 1.0 / m as f64);
                        }
                    } else {
                        for r in 0..m {
                            let share = g[r] / n as f64;
                            gx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += share);
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let n = node.value.cols();
                    let gx = acc(&mut grads, *x, numel(*x));
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (l, d) = (node.value.shape()[0], node.value.shape()[1]);
                    let heads = *heads;
                    let dh = d / heads;
                    let scale = 1.0 / libm::sqrt(dh as f64);
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut gq = vec![0.0; l * d];
                    let mut gk = vec![0.0; l * d];
                    let mut gv = vec![0.0; l * d];
                    // dP = dO Vᵀ per head, then dS = P ⊙ (dP − rowsum(P ⊙ dP)) · scale
                    let mut ds = vec![0.0; heads * l * l];
                    let mut prod = vec![0.0; d];
                    let mut w = vec![0.0; d];
                    for i in 0..l {
                        let gi = &g[i * d..(i + 1) * d];
                        for j in 0..l {
                            if !head_weights(probs, l, i, j, dh, &mut w) {
                                continue;
                            }
                            let vj = &vd[j * d..(j + 1) * d];
                            for ((p, a), b) in prod.iter_mut().zip(gi).zip(vj) {
                                *p = a * b;
                            }
                            for (h, group) in prod.chunks(dh).enumerate() {
                                ds[(h * l + i) * l + j] = group.iter().sum::<f64>();
                            }
                            for ((o, wc), gc) in gv[j * d..(j + 1) * d].iter_mut().zip(&w).zip(gi) {
                                *o += wc * gc;
                            }
                        }
                    }
                    for h in 0..heads {
                        let rows = (h * l * l..(h + 1) * l * l).step_by(l);
                        for r in rows {
                            let prow = &probs[r..r + l];
                            let drow = &mut ds[r..r + l];
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                    }
                    for i in 0..l {
                        let qi = &qd[i * d..(i + 1) * d];
                        for j in 0..l {
                            if !head_weights(&ds, l, i, j, dh, &mut w) {
                                continue;
                            }
                            let kj = &kd[j * d..(j + 1) * d];
                            for ((o, wc), kc) in gq[i * d..(i + 1) * d].iter_mut().zip(&w).zip(kj) {
                                *o += wc * kc;
                            }
                            for ((o, wc), qc) in gk[j * d..(j + 1) * d].iter_mut().zip(&w).zip(qi) {
                                *o += wc * qc;
                            }
                        }
                    }
                    for (var, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if self.ng(var) {
                            add_into(acc(&mut grads, var, l * d), &grad, 1.0);
                        }
                    }
                }
                Op::TopKRenorm { x, keep, total } => {
                    let y = node.value.data();
                    let dot: f64 = keep.iter().map(|&j| g[j] * y[j]).sum();
                    let gx = acc(&mut grads, *x, g.len());
                    for &i in keep {
                        gx[i] += (g[i] - dot) / total;
                    }
                }
                Op::Element { x, index } => {
                    let len = numel(*x);
                    acc(&mut grads, *x, len)[*index] += g[0];
                }
                Op::Bce { p, labels } => {
                    let pv = self.value(*p).data();
                    let n = labels.len() as f64;
                    let gp = acc(&mut grads, *p, labels.len());
                    for i in 0..labels.len() {
                        let pi = pv[i];
                        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                            gp[i] += g[0] * (pi - labels[i]) / (pi * (1.0 - pi)) / n;
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = numel(*x);
                    acc(&mut grads, *x, len).iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

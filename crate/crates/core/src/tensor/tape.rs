use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, axis_split, gemm_nt_acc, gemm_tn_acc, row_stats};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Select { x: Var, index: usize },
    Upsample(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in forward order; [`Tape::backward`] walks them in
/// exact reverse. Only nodes downstream of a trainable leaf carry gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: BTreeMap<String, Vec<f64>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to a trainable leaf.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// Gradient of a named parameter, summed over all its uses on the tape.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Node indices in the order backward rules were applied.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// Adds `scale · ∂loss/∂p` into the grad buffer of every trainable
    /// parameter that was reached. Frozen parameters are skipped.
    pub fn accumulate_into<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Parameter>,
        scale: f64,
    ) -> Result<()> {
        for p in params {
            if p.is_frozen() {
                continue;
            }
            if let Some(g) = self.params.get(&p.name) {
                p.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf { param: None }, false)
    }

    /// An anonymous leaf that receives gradient; useful for input gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf { param: None }, true)
    }

    /// Records a parameter. Frozen parameters are recorded as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let trainable = !p.is_frozen();
        self.push(
            p.tensor().detached(),
            Op::Leaf {
                param: trainable.then(|| p.name.clone()),
            },
            trainable,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::div(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = kernels::add_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = kernels::scale(self.value(x), s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = kernels::add_scalar(self.value(x), s);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = kernels::sum(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = kernels::ln(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Ln(x), rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = kernels::clamp(self.value(x), lo, hi);
        let rg = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = kernels::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = kernels::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_rows(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_rows(&ts)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_cols(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_cols(&ts)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = kernels::select(self.value(x), index)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Select { x, index }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = kernels::bilinear_upsample(self.value(x), out_h, out_w)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Upsample(x), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            out.visited.push(idx);
            self.apply_rule(node, &g, &mut grads)?;
            if let Op::Leaf { param } = &node.op {
                if let Some(name) = param {
                    match out.params.get_mut(name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            out.params.insert(name.clone(), g.clone());
                        }
                    }
                }
                out.leaves.insert(idx, g);
            }
        }
        Ok(out)
    }

    fn apply_rule(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &|buf| gemm_nt_acc(g, bv.data(), buf, m, n, k));
                acc(*b, &|buf| gemm_tn_acc(av.data(), g, buf, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, &|buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|buf| add_into(buf, g));
                acc(*bias, &|buf| {
                    let n = buf.len();
                    for (i, d) in g.iter().enumerate() {
                        buf[i % n] += d;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &|buf| buf.iter_mut().zip(g).for_each(|(o, d)| *o += s * d)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &|buf| add_into(buf, g)),
            Op::Sum(x) => acc(*x, &|buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(*x, &|buf| {
                    for i in 0..buf.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &|buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = xv.numel() / d;
                let stats: Vec<(f64, f64)> =
                    xv.data().chunks(d).map(|r| row_stats(r, *eps)).collect();
                let xhat = |r: usize, j: usize| (xv.data()[r * d + j] - stats[r].0) * stats[r].1;
                acc(*gain, &|buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                acc(*bias, &|buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
                acc(*x, &|buf| {
                    let n = d as f64;
                    for r in 0..rows {
                        let inv = stats[r].1;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xhat(r, j);
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            buf[r * d + j] += inv / n * (n * dxh - s1 - xhat(r, j) * s2);
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                acc(*x, &|buf| add_into(&mut buf[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(*p, &|buf| add_into(buf, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.value(*x).shape()[1];
                acc(*x, &|buf| {
                    for i in 0..r {
                        add_into(&mut buf[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    acc(*p, &|buf| {
                        for i in 0..r {
                            add_into(&mut buf[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Select { x, index } => {
                let n = node.value.numel();
                acc(*x, &|buf| add_into(&mut buf[index * n..(index + 1) * n], g));
            }
            Op::Upsample(x) => {
                let src = self.value(*x).shape();
                let (k, h, w) = (src[0], src[1], src[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                acc(*x, &|buf| {
                    let back = kernels::bilinear_upsample_adjoint(g, k, (h, w), (oh, ow));
                    add_into(buf, &back);
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

//! Forward kernels. Every tape operation calls into these, so eager and
//! recorded evaluation produce bit-identical values.

use super::Tensor;
use crate::error::{Error, Result};

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Argument(format!(
            "{op} expects a rank-2 tensor, got shape {s:?}"
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `out[m×n] += a[m×k] · b[k×n]` on raw row-major buffers.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = dims2(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

fn zip_with(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.data().contains(&0.0) {
        return Err(Error::Argument("division by zero".into()));
    }
    zip_with(a, b, "div", |x, y| x / y)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i]))
}

/// Adds a length-`n` bias to every row of an `m×n` tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(x, "add_bias")?;
    if bias.shape() != [n] {
        return Err(Error::dim("add_bias", x.shape(), bias.shape()));
    }
    let b = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[i % n])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    map(x, |v| v * s)
}

pub fn add_scalar(x: &Tensor, s: f64) -> Tensor {
    map(x, |v| v + s)
}

pub fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn ln(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Argument("log of a non-positive value".into()));
    }
    Ok(map(x, f64::ln))
}

pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    map(x, |v| v.clamp(lo, hi))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, |v| v * normal_cdf(v))
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    normal_cdf(v) + v * normal_pdf(v)
}

/// Splits a shape around `axis` into (outer, axis length, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Argument(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row statistics for layer normalization: (mean, 1/sqrt(var + eps)).
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Argument("layer_norm of a scalar".into()))?;
    if gain.shape() != [d] {
        return Err(Error::dim("layer_norm gain", x.shape(), gain.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::dim("layer_norm bias", x.shape(), bias.shape()));
    }
    let (g, b) = (gain.data(), bias.data());
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let (mean, inv) = row_stats(row, eps);
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = dims2(x, "slice_rows")?;
    if start + len > r {
        return Err(Error::Argument(format!(
            "row slice {start}..{} out of range for {r} rows",
            start + len
        )));
    }
    Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
    let (_, c) = dims2(first, "concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = dims2(p, "concat_rows")?;
        if pc != c {
            return Err(Error::dim("concat_rows", first.shape(), p.shape()));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, c], data)
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = dims2(x, "slice_cols")?;
    if start + len > c {
        return Err(Error::Argument(format!(
            "column slice {start}..{} out of range for {c} columns",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(r * len);
    for row in x.data().chunks(c) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(vec![r, len], data)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
    let (r, _) = dims2(first, "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = dims2(p, "concat_cols")?;
        if pr != r {
            return Err(Error::dim("concat_cols", first.shape(), p.shape()));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![r, total], data)
}

/// Plane `index` of a rank-3 tensor along its first axis.
pub fn select(x: &Tensor, index: usize) -> Result<Tensor> {
    match x.shape() {
        [k, h, w] if index < *k => {
            let n = h * w;
            Tensor::new(vec![*h, *w], x.data()[index * n..(index + 1) * n].to_vec())
        }
        s => Err(Error::Argument(format!(
            "cannot select plane {index} from shape {s:?}"
        ))),
    }
}

/// Source taps for one output coordinate under the half-pixel-centre
/// convention: `(i0, i1, weight of i1)`.
pub(crate) fn linear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize of every `h×w` plane of a `K×h×w` tensor
/// (align-corners = false).
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (k, h, w) = match x.shape() {
        [k, h, w] => (*k, *h, *w),
        s => {
            return Err(Error::Argument(format!(
                "bilinear_upsample expects K×h×w, got {s:?}"
            )))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::Argument("bilinear_upsample of an empty plane".into()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "target size must be positive, got {out_h}×{out_w}"
        )));
    }
    let ys: Vec<_> = (0..out_h).map(|y| linear_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|c| linear_taps(c, w, out_w)).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(k * out_h * out_w);
    for plane in 0..k {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                // `a + t·(b − a)` reproduces constant fields exactly.
                let (a, b) = (p[y0 * w + x0], p[y0 * w + x1]);
                let top = a + fx * (b - a);
                let (a, b) = (p[y1 * w + x0], p[y1 * w + x1]);
                let bot = a + fx * (b - a);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(vec![k, out_h, out_w], out)
}

/// Transpose of [`bilinear_upsample`]: scatters an output-space gradient
/// back onto the source grid.
pub(crate) fn bilinear_upsample_adjoint(
    grad_out: &[f64],
    k: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let ys: Vec<_> = (0..out_h).map(|y| linear_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|c| linear_taps(c, w, out_w)).collect();
    let mut g = vec![0.0; k * h * w];
    for plane in 0..k {
        let gp = &mut g[plane * h * w..(plane + 1) * h * w];
        let go = &grad_out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (yi, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (xi, &(x0, x1, fx)) in xs.iter().enumerate() {
                let d = go[yi * out_w + xi];
                gp[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                gp[y0 * w + x1] += d * (1.0 - fy) * fx;
                gp[y1 * w + x0] += d * fy * (1.0 - fx);
                gp[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    g
}

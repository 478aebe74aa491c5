use super::{kernels, Parameter, Tape, Tensor, Var};
use crate::error::Result;

/// Execution context for model code.
///
/// [`Eager`] evaluates immediately and keeps nothing; [`Tape`] evaluates the
/// same kernels and records them for [`Tape::backward`].
pub trait Graph {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn param(&mut self, p: &Parameter) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, s: f64) -> Self::Value;
    fn add_scalar(&mut self, x: &Self::Value, s: f64) -> Self::Value;
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
    fn ln(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn clamp(&mut self, x: &Self::Value, lo: f64, hi: f64) -> Self::Value;
    fn gelu(&mut self, x: &Self::Value) -> Self::Value;
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    fn slice_rows(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn slice_cols(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn select(&mut self, x: &Self::Value, index: usize) -> Result<Self::Value>;
    fn bilinear_upsample(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
}

/// Tape-free evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Value = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t.detached()
    }
    fn param(&mut self, p: &Parameter) -> Tensor {
        p.tensor().detached()
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::matmul(a, b)
    }
    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        kernels::transpose(a)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::mul(a, b)
    }
    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::div(a, b)
    }
    fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        kernels::add_bias(x, bias)
    }
    fn scale(&mut self, x: &Tensor, s: f64) -> Tensor {
        kernels::scale(x, s)
    }
    fn add_scalar(&mut self, x: &Tensor, s: f64) -> Tensor {
        kernels::add_scalar(x, s)
    }
    fn sum(&mut self, x: &Tensor) -> Tensor {
        kernels::sum(x)
    }
    fn ln(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::ln(x)
    }
    fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Tensor {
        kernels::clamp(x, lo, hi)
    }
    fn gelu(&mut self, x: &Tensor) -> Tensor {
        kernels::gelu(x)
    }
    fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        kernels::softmax(x, axis)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        kernels::layer_norm(x, gain, bias, eps)
    }
    fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        kernels::slice_rows(x, start, len)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        kernels::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        kernels::slice_cols(x, start, len)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        kernels::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.reshape(shape)
    }
    fn select(&mut self, x: &Tensor, index: usize) -> Result<Tensor> {
        kernels::select(x, index)
    }
    fn bilinear_upsample(&mut self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        kernels::bilinear_upsample(x, h, w)
    }
}

impl Graph for Tape {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Tape::value(self, *v)
    }
    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }
    fn param(&mut self, p: &Parameter) -> Var {
        Tape::param(self, p)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        Tape::transpose(self, *a)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::sub(self, *a, *b)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::mul(self, *a, *b)
    }
    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::div(self, *a, *b)
    }
    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        Tape::add_bias(self, *x, *bias)
    }
    fn scale(&mut self, x: &Var, s: f64) -> Var {
        Tape::scale(self, *x, s)
    }
    fn add_scalar(&mut self, x: &Var, s: f64) -> Var {
        Tape::add_scalar(self, *x, s)
    }
    fn sum(&mut self, x: &Var) -> Var {
        Tape::sum(self, *x)
    }
    fn ln(&mut self, x: &Var) -> Result<Var> {
        Tape::ln(self, *x)
    }
    fn clamp(&mut self, x: &Var, lo: f64, hi: f64) -> Var {
        Tape::clamp(self, *x, lo, hi)
    }
    fn gelu(&mut self, x: &Var) -> Var {
        Tape::gelu(self, *x)
    }
    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        Tape::softmax(self, *x, axis)
    }
    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        Tape::layer_norm(self, *x, *gain, *bias, eps)
    }
    fn slice_rows(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_rows(self, *x, start, len)
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_rows(self, parts)
    }
    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_cols(self, *x, start, len)
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_cols(self, parts)
    }
    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        Tape::reshape(self, *x, shape)
    }
    fn select(&mut self, x: &Var, index: usize) -> Result<Var> {
        Tape::select(self, *x, index)
    }
    fn bilinear_upsample(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        Tape::bilinear_upsample(self, *x, h, w)
    }
}

//! Pre-norm transformer block shared by the encoder trunk and the mask
//! transformer head.

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, truncated_normal_init, Graph, Parameter, Tensor, TRUNC_NORMAL_STD};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

/// Truncated-normal weight matrix (std 0.02, cut at ±2σ) seeded per name.
pub(crate) fn init_matrix(name: &str, shape: &[usize], seed: u64) -> Tensor {
    truncated_normal_init(
        shape,
        0.0,
        TRUNC_NORMAL_STD,
        2.0 * TRUNC_NORMAL_STD,
        derive_seed(seed, name),
    )
    .expect("std is positive")
}

pub(crate) fn make_param(name: String, t: Tensor, frozen: bool) -> Parameter {
    if frozen {
        Parameter::frozen(name, t)
    } else {
        Parameter::trainable(name, t)
    }
}

/// Weights of one block:
/// `x + Attn(LN₁(x))` followed by `x + MLP(LN₂(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: Parameter,
    pub norm1_bias: Parameter,
    /// `[D × 3D]`, columns ordered q | k | v.
    pub qkv_weight: Parameter,
    pub qkv_bias: Parameter,
    pub proj_weight: Parameter,
    pub proj_bias: Parameter,
    pub norm2_gain: Parameter,
    pub norm2_bias: Parameter,
    pub fc1_weight: Parameter,
    pub fc1_bias: Parameter,
    pub fc2_weight: Parameter,
    pub fc2_bias: Parameter,
}

impl BlockParams {
    /// Names and shapes in a fixed order, e.g. for container schemas.
    pub fn schema(prefix: &str, dim: usize) -> Vec<(String, Vec<usize>)> {
        let h = dim * MLP_RATIO;
        [
            ("norm1.gain", vec![dim]),
            ("norm1.bias", vec![dim]),
            ("attn.qkv.weight", vec![dim, 3 * dim]),
            ("attn.qkv.bias", vec![3 * dim]),
            ("attn.proj.weight", vec![dim, dim]),
            ("attn.proj.bias", vec![dim]),
            ("norm2.gain", vec![dim]),
            ("norm2.bias", vec![dim]),
            ("mlp.fc1.weight", vec![dim, h]),
            ("mlp.fc1.bias", vec![h]),
            ("mlp.fc2.weight", vec![h, dim]),
            ("mlp.fc2.bias", vec![dim]),
        ]
        .into_iter()
        .map(|(n, s)| (format!("{prefix}.{n}"), s))
        .collect()
    }

    /// Builds a block from a name → tensor lookup in schema order.
    pub fn from_tensors(
        prefix: &str,
        dim: usize,
        frozen: bool,
        mut take: impl FnMut(&str, &[usize]) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut it = Self::schema(prefix, dim).into_iter().map(|(name, shape)| {
            let t = take(&name, &shape)?;
            Ok::<_, Error>(make_param(name, t, frozen))
        });
        let mut next = || it.next().expect("schema has 12 entries");
        Ok(Self {
            norm1_gain: next()?,
            norm1_bias: next()?,
            qkv_weight: next()?,
            qkv_bias: next()?,
            proj_weight: next()?,
            proj_bias: next()?,
            norm2_gain: next()?,
            norm2_bias: next()?,
            fc1_weight: next()?,
            fc1_bias: next()?,
            fc2_weight: next()?,
            fc2_bias: next()?,
        })
    }

    /// Standard initialization: truncated-normal matrices, zero biases,
    /// unit norm gains.
    pub fn init(prefix: &str, dim: usize, seed: u64, frozen: bool) -> Self {
        Self::from_tensors(prefix, dim, frozen, |name, shape| {
            Ok(if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                init_matrix(name, shape, seed)
            })
        })
        .expect("initializer cannot fail")
    }

    pub fn parameters(&self) -> [&Parameter; 12] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 12] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }
}

/// Full (unmasked) multi-head self-attention over the rows of `x`.
pub fn self_attention<G: Graph>(
    g: &mut G,
    x: &G::Value,
    p: &BlockParams,
    num_heads: usize,
) -> Result<G::Value> {
    let dim = g.value(x).shape()[1];
    if num_heads == 0 || dim % num_heads != 0 {
        return Err(Error::Argument(format!(
            "embed dim {dim} is not divisible by {num_heads} heads"
        )));
    }
    let head_dim = dim / num_heads;
    let w = g.param(&p.qkv_weight);
    let b = g.param(&p.qkv_bias);
    let qkv = g.matmul(x, &w)?;
    let qkv = g.add_bias(&qkv, &b)?;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let q = g.slice_cols(&qkv, h * head_dim, head_dim)?;
        let k = g.slice_cols(&qkv, dim + h * head_dim, head_dim)?;
        let v = g.slice_cols(&qkv, 2 * dim + h * head_dim, head_dim)?;
        let kt = g.transpose(&k)?;
        let scores = g.matmul(&q, &kt)?;
        let scores = g.scale(&scores, inv_sqrt);
        let attn = g.softmax(&scores, 1)?;
        heads.push(g.matmul(&attn, &v)?);
    }
    let merged = g.concat_cols(&heads)?;
    let w = g.param(&p.proj_weight);
    let b = g.param(&p.proj_bias);
    let out = g.matmul(&merged, &w)?;
    g.add_bias(&out, &b)
}

fn mlp<G: Graph>(g: &mut G, x: &G::Value, p: &BlockParams) -> Result<G::Value> {
    let w1 = g.param(&p.fc1_weight);
    let b1 = g.param(&p.fc1_bias);
    let h = g.matmul(x, &w1)?;
    let h = g.add_bias(&h, &b1)?;
    let h = g.gelu(&h);
    let w2 = g.param(&p.fc2_weight);
    let b2 = g.param(&p.fc2_bias);
    let o = g.matmul(&h, &w2)?;
    g.add_bias(&o, &b2)
}

/// One pre-norm transformer block over a `[S × D]` sequence.
pub fn block_forward<G: Graph>(
    g: &mut G,
    x: &G::Value,
    p: &BlockParams,
    num_heads: usize,
) -> Result<G::Value> {
    let g1 = g.param(&p.norm1_gain);
    let b1 = g.param(&p.norm1_bias);
    let h = g.layer_norm(x, &g1, &b1, LAYER_NORM_EPS)?;
    let a = self_attention(g, &h, p, num_heads)?;
    let x = g.add(x, &a)?;
    let g2 = g.param(&p.norm2_gain);
    let b2 = g.param(&p.norm2_bias);
    let h = g.layer_norm(&x, &g2, &b2, LAYER_NORM_EPS)?;
    let m = mlp(g, &h, p)?;
    g.add(&x, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Eager, Tape};

    #[test]
    fn tape_and_eager_agree_bitwise() {
        let p = BlockParams::init("b", 8, 3, false);
        let x = Tensor::from_fn(&[5, 8], |i| ((i * 7) % 11) as f64 / 11.0 - 0.4);
        let eager = block_forward(&mut Eager, &x, &p, 2).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = block_forward(&mut tape, &xv, &p, 2).unwrap();
        assert_eq!(tape.value(out), &eager);
    }

    #[test]
    fn heads_must_divide_dim() {
        let p = BlockParams::init("b", 6, 3, true);
        let x = Tensor::zeros(&[2, 6]);
        assert!(block_forward(&mut Eager, &x, &p, 4).is_err());
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let mut p = BlockParams::init("b", 4, 1, false);
        for v in p.proj_weight.values_mut().unwrap() {
            *v = 0.0;
        }
        for v in p.fc2_weight.values_mut().unwrap() {
            *v = 0.0;
        }
        let x = Tensor::from_fn(&[3, 4], |i| i as f64);
        assert_eq!(block_forward(&mut Eager, &x, &p, 2).unwrap(), x);
    }
}

//! Frozen vision-transformer encoder: patch embedding, learned positional
//! embeddings, pre-norm transformer blocks. No class token and no
//! classification head; the output is one feature vector per patch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{DType, WeightContainer};
use crate::error::{Error, Result};
use crate::nn::{block_forward, init_matrix, BlockParams, LAYER_NORM_EPS};
use crate::tensor::{kernels, Eager, Parameter, Tensor};

pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Apply a LayerNorm to the trunk output.
    pub final_norm: bool,
}

impl Default for EncoderConfig {
    /// ViT-large layout: 224 px input, 16 px patches, 1024-d, 16 heads,
    /// 24 blocks.
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 1024,
            num_heads: 16,
            num_blocks: 24,
            final_norm: true,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale preset: 32 px input, 8 px patches, 64-d, 4 heads, 2 blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 2,
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    /// Every tensor name and shape the weights must provide.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut s = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_patches(), d]),
        ];
        for i in 0..self.num_blocks {
            s.extend(BlockParams::schema(&format!("blocks.{i}"), d));
        }
        if self.final_norm {
            s.push(("norm.gain".to_string(), vec![d]));
            s.push(("norm.bias".to_string(), vec![d]));
        }
        s
    }
}

/// Encoder parameters. Every parameter is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub patch_weight: Parameter,
    pub patch_bias: Parameter,
    pub pos_embed: Parameter,
    pub blocks: Vec<BlockParams>,
    pub norm: Option<(Parameter, Parameter)>,
}

impl EncoderWeights {
    /// Seeded random stand-in for pretrained weights.
    pub fn random(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = Self::from_lookup(cfg, |name, shape| {
            Ok(if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                init_matrix(name, shape, seed)
            })
        })?;
        Ok(c)
    }

    fn from_lookup(
        cfg: &EncoderConfig,
        mut take: impl FnMut(&str, &[usize]) -> Result<Tensor>,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let mut frozen = |name: &str, shape: &[usize]| -> Result<Parameter> {
            Ok(Parameter::frozen(name, take(name, shape)?))
        };
        let patch_weight = frozen("patch_embed.weight", &[cfg.patch_dim(), d])?;
        let patch_bias = frozen("patch_embed.bias", &[d])?;
        let pos_embed = frozen("pos_embed", &[cfg.num_patches(), d])?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(BlockParams::from_tensors(&format!("blocks.{i}"), d, true, |n, s| {
                Ok(frozen(n, s)?.tensor().clone())
            })?);
        }
        let norm = if cfg.final_norm {
            Some((frozen("norm.gain", &[d])?, frozen("norm.bias", &[d])?))
        } else {
            None
        };
        Ok(Self {
            patch_weight,
            patch_bias,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn from_container(c: &WeightContainer, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_lookup(cfg, |name, shape| c.expect(name, shape))
    }

    pub fn to_container(&self) -> WeightContainer {
        let mut c = WeightContainer::new();
        for p in self.parameters() {
            c.insert(p.name.clone(), p.tensor());
        }
        c.metadata.insert("kind".into(), "encoder".into());
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path, DType::F64)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.patch_weight, &self.patch_bias, &self.pos_embed];
        for b in &self.blocks {
            v.extend(b.parameters());
        }
        if let Some((g, b)) = &self.norm {
            v.push(g);
            v.push(b);
        }
        v
    }

    /// Checksum over every parameter's name and bytes.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.parameters() {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.tensor().data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::container::checksum64(&bytes)
    }
}

/// Reads encoder weights from a container file and checks them against the
/// schema implied by `cfg`.
pub fn load_weights(path: impl AsRef<Path>, cfg: &EncoderConfig) -> Result<EncoderWeights> {
    let c = WeightContainer::load(path)?;
    EncoderWeights::from_container(&c, cfg)
}

/// Splits a `3×H×W` image into non-overlapping patches (row-major patch
/// order, each flattened channel-major then row then column), projects
/// them, and adds positional embeddings.
pub fn patchify_embed(image: &Tensor, cfg: &EncoderConfig, w: &EncoderWeights) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape() != [IN_CHANNELS, s, s] {
        return Err(Error::Argument(format!(
            "encoder expects a {IN_CHANNELS}×{s}×{s} image, got {:?}",
            image.shape()
        )));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let mut rows = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for ch in 0..IN_CHANNELS {
                for y in 0..p {
                    for x in 0..p {
                        rows.push(image.at3(ch, pr * p + y, pc * p + x));
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], rows)?;
    let tokens = kernels::matmul(&patches, w.patch_weight.tensor())?;
    let tokens = kernels::add_bias(&tokens, w.patch_bias.tensor())?;
    kernels::add(&tokens, w.pos_embed.tensor())
}

/// Runs the transformer trunk over `[N×D]` tokens without recording
/// anything for differentiation.
pub fn encoder_forward(tokens: &Tensor, cfg: &EncoderConfig, w: &EncoderWeights) -> Result<Tensor> {
    if tokens.rank() != 2 || tokens.shape()[1] != cfg.embed_dim {
        return Err(Error::Argument(format!(
            "encoder tokens must be N×{}, got {:?}",
            cfg.embed_dim,
            tokens.shape()
        )));
    }
    let mut x = tokens.clone();
    for b in &w.blocks {
        x = block_forward(&mut Eager, &x, b, cfg.num_heads)?;
    }
    if let Some((g, b)) = &w.norm {
        x = kernels::layer_norm(&x, g.tensor(), b.tensor(), LAYER_NORM_EPS)?;
    }
    Ok(x)
}

/// Encoder configuration bundled with its frozen weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    pub cfg: EncoderConfig,
    pub weights: EncoderWeights,
}

impl FrozenEncoder {
    pub fn random(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let weights = EncoderWeights::random(&cfg, seed)?;
        Ok(Self { cfg, weights })
    }

    /// Image `3×S×S` → patch features `N×D`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let tokens = patchify_embed(image, &self.cfg, &self.weights)?;
        encoder_forward(&tokens, &self.cfg, &self.weights)
    }

    pub fn checksum(&self) -> u64 {
        self.weights.checksum()
    }
}

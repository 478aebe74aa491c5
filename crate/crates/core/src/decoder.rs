//! Mask transformer head.
//!
//! Learnable class tokens are appended to the frozen patch features, the
//! joint sequence runs through a few transformer blocks, and each mask
//! logit is the scalar product of a class-token output with a patch output.
//! Logits are reshaped to the patch grid, bilinearly upsampled to image
//! size, and turned into per-pixel class probabilities by a softmax over
//! classes.

use serde::{Deserialize, Serialize};

use crate::container::WeightContainer;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::{block_forward, init_matrix, BlockParams};
use crate::tensor::{Graph, Parameter, Tape, Tensor, Var};

/// Class index of the background.
pub const BACKGROUND: usize = 0;
/// Class index of the optic disc.
pub const FOREGROUND: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    /// Linear `D→D` map applied to encoder features before the blocks.
    pub input_projection: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 1024,
            num_heads: 16,
            num_blocks: 2,
            num_classes: 2,
            input_projection: false,
        }
    }
}

impl HeadConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "head embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut s = vec![("cls_tokens".to_string(), vec![self.num_classes, d])];
        if self.input_projection {
            s.push(("proj_in.weight".to_string(), vec![d, d]));
            s.push(("proj_in.bias".to_string(), vec![d]));
        }
        for i in 0..self.num_blocks {
            s.extend(BlockParams::schema(&format!("head.blocks.{i}"), d));
        }
        s
    }
}

/// Trainable head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub class_tokens: Parameter,
    pub projection: Option<(Parameter, Parameter)>,
    pub blocks: Vec<BlockParams>,
}

impl HeadWeights {
    /// Truncated-normal initialization, deterministic in `seed`.
    pub fn init(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::from_lookup(cfg, |name, shape| {
            Ok(if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                init_matrix(name, shape, seed)
            })
        })
    }

    fn from_lookup(cfg: &HeadConfig, mut take: impl FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<Self> {
        let d = cfg.embed_dim;
        let class_tokens = Parameter::trainable("cls_tokens", take("cls_tokens", &[cfg.num_classes, d])?);
        let projection = if cfg.input_projection {
            Some((
                Parameter::trainable("proj_in.weight", take("proj_in.weight", &[d, d])?),
                Parameter::trainable("proj_in.bias", take("proj_in.bias", &[d])?),
            ))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(BlockParams::from_tensors(&format!("head.blocks.{i}"), d, false, &mut take)?);
        }
        Ok(Self {
            class_tokens,
            projection,
            blocks,
        })
    }

    pub fn from_container(c: &WeightContainer, cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_lookup(cfg, |name, shape| c.expect(name, shape))
    }

    pub fn to_container(&self) -> WeightContainer {
        let mut c = WeightContainer::new();
        for p in self.parameters() {
            c.insert(p.name.clone(), p.tensor());
        }
        c.metadata.insert("kind".into(), "head".into());
        c
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.class_tokens];
        if let Some((w, b)) = &self.projection {
            v.push(w);
            v.push(b);
        }
        for b in &self.blocks {
            v.extend(b.parameters());
        }
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.class_tokens];
        if let Some((w, b)) = &mut self.projection {
            v.push(w);
            v.push(b);
        }
        for b in &mut self.blocks {
            v.extend(b.parameters_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn num_values(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor().numel()).sum()
    }
}

/// Patch features `[N×D]` → mask logits `[K×N]`.
pub fn head_forward<G: Graph>(
    g: &mut G,
    features: &Tensor,
    cfg: &HeadConfig,
    w: &HeadWeights,
) -> Result<G::Value> {
    if features.rank() != 2 || features.shape()[1] != cfg.embed_dim {
        return Err(Error::Argument(format!(
            "head expects N×{} features, got {:?}",
            cfg.embed_dim,
            features.shape()
        )));
    }
    let n = features.shape()[0];
    let k = cfg.num_classes;
    let mut x = g.constant(features.clone());
    if let Some((pw, pb)) = &w.projection {
        let pw = g.param(pw);
        let pb = g.param(pb);
        x = g.matmul(&x, &pw)?;
        x = g.add_bias(&x, &pb)?;
    }
    let cls = g.param(&w.class_tokens);
    let mut seq = g.concat_rows(&[x, cls])?;
    for b in &w.blocks {
        seq = block_forward(g, &seq, b, cfg.num_heads)?;
    }
    let patches = g.slice_rows(&seq, 0, n)?;
    let classes = g.slice_rows(&seq, n, k)?;
    let pt = g.transpose(&patches)?;
    g.matmul(&classes, &pt)
}

/// Runs [`head_forward`] on a fresh tape and returns it with the logits.
pub fn head_forward_taped(features: &Tensor, cfg: &HeadConfig, w: &HeadWeights) -> Result<(Var, Tape)> {
    let mut tape = Tape::new();
    let logits = head_forward(&mut tape, features, cfg, w)?;
    Ok((logits, tape))
}

/// Mask logits `[K×N]` → class probabilities `[K×H×W]`. Logit column `n`
/// maps to patch-grid cell `(n / g, n % g)`, matching patch order.
pub fn logits_to_probmap<G: Graph>(
    g: &mut G,
    logits: &G::Value,
    height: usize,
    width: usize,
) -> Result<G::Value> {
    let shape = g.value(logits).shape().to_vec();
    let [k, n] = shape[..] else {
        return Err(Error::Argument(format!("mask logits must be K×N, got {shape:?}")));
    };
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::Argument(format!("{n} patches do not form a square grid")));
    }
    let grid = g.reshape(logits, &[k, side, side])?;
    let up = g.bilinear_upsample(&grid, height, width)?;
    g.softmax(&up, 0)
}

/// Per-pixel class probabilities `[K×H×W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] < 2 {
            return Err(Error::Argument(format!(
                "probability map must be K×H×W with K ≥ 2, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let (h, w) = self.size();
        &self.0.data()[k * h * w..(k + 1) * h * w]
    }
}

/// Per-pixel argmax; a pixel is foreground only if `fg_class` strictly
/// beats every other class, so ties go to background.
pub fn predict_mask(probmap: &ProbMap, fg_class: usize) -> Result<BinaryMask> {
    let k = probmap.num_classes();
    if fg_class >= k {
        return Err(Error::Argument(format!(
            "foreground class {fg_class} out of range for {k} classes"
        )));
    }
    let (h, w) = probmap.size();
    let fg = probmap.plane(fg_class);
    let data = (0..h * w)
        .map(|i| (0..k).filter(|&c| c != fg_class).all(|c| fg[i] > probmap.plane(c)[i]))
        .collect();
    BinaryMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Eager;

    fn toy_features(n: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[n, d], |i| ((i * 37 % 101) as f64 / 101.0) - 0.5)
    }

    #[test]
    fn logits_shape_is_classes_by_patches() {
        let cfg = HeadConfig::toy();
        let w = HeadWeights::init(&cfg, 0).unwrap();
        let logits = head_forward(&mut Eager, &toy_features(16, 64), &cfg, &w).unwrap();
        assert_eq!(logits.shape(), &[2, 16]);
    }

    #[test]
    fn wrong_feature_dim_rejected() {
        let cfg = HeadConfig::toy();
        let w = HeadWeights::init(&cfg, 0).unwrap();
        assert!(head_forward(&mut Eager, &toy_features(16, 32), &cfg, &w).is_err());
    }

    #[test]
    fn single_class_config_rejected() {
        let cfg = HeadConfig {
            num_classes: 1,
            ..HeadConfig::toy()
        };
        assert!(HeadWeights::init(&cfg, 0).is_err());
    }

    #[test]
    fn probmap_sums_to_one_per_pixel() {
        let logits = Tensor::from_fn(&[2, 16], |i| (i as f64 * 1.3).sin() * 4.0);
        let p = logits_to_probmap(&mut Eager, &logits, 32, 32).unwrap();
        for i in 0..32 * 32 {
            let s = p.data()[i] + p.data()[1024 + i];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_give_half_and_tie_to_background() {
        let logits = Tensor::full(&[2, 4], 0.7);
        let p = logits_to_probmap(&mut Eager, &logits, 6, 6).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
        let m = predict_mask(&ProbMap::new(p).unwrap(), FOREGROUND).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn boosted_class_wins_everywhere() {
        let mut logits = Tensor::from_fn(&[2, 9], |i| (i as f64 * 0.77).cos() * 3.0);
        let base = logits.clone();
        for j in 0..9 {
            logits.data_mut()[9 + j] = base.data()[9 + j] + 10.0;
        }
        // the boost must exceed the spread of the original logits
        let spread = base.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) * 2.0;
        assert!(spread < 10.0);
        let p = ProbMap::new(logits_to_probmap(&mut Eager, &logits, 12, 12).unwrap()).unwrap();
        assert_eq!(predict_mask(&p, FOREGROUND).unwrap().count(), 144);
    }

    #[test]
    fn non_square_patch_count_rejected() {
        let logits = Tensor::zeros(&[2, 15]);
        assert!(logits_to_probmap(&mut Eager, &logits, 8, 8).is_err());
    }

    #[test]
    fn confident_map_predicts_full_foreground() {
        let mut t = Tensor::zeros(&[2, 3, 3]);
        for i in 0..9 {
            t.data_mut()[i] = 0.1;
            t.data_mut()[9 + i] = 0.9;
        }
        let m = predict_mask(&ProbMap::new(t).unwrap(), FOREGROUND).unwrap();
        assert_eq!(m.count(), 9);
        assert!(predict_mask(&ProbMap::new(Tensor::zeros(&[2, 1, 1])).unwrap(), 2).is_err());
    }

    #[test]
    fn container_roundtrip() {
        let cfg = HeadConfig {
            input_projection: true,
            ..HeadConfig::toy()
        };
        let w = HeadWeights::init(&cfg, 4).unwrap();
        let c = w.to_container();
        assert_eq!(c.len(), cfg.schema().len());
        assert_eq!(HeadWeights::from_container(&c, &cfg).unwrap(), w);
    }
}

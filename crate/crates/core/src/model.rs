//! Frozen encoder plus trainable head, with head checkpoints.

use std::path::Path;

use crate::container::{DType, WeightContainer};
use crate::decoder::{
    head_forward, logits_to_probmap, predict_mask, HeadConfig, HeadWeights, ProbMap, FOREGROUND,
};
use crate::encoder::{EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::objectives::{segmentation_loss, GroundTruth, LossConfig};
use crate::tensor::{Eager, Gradients, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub encoder: FrozenEncoder,
    pub head_cfg: HeadConfig,
    pub head: HeadWeights,
}

/// Loss value and parameter gradients for one image.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
}

impl SegModel {
    pub fn new(encoder: FrozenEncoder, head_cfg: HeadConfig, head_seed: u64) -> Result<Self> {
        check_dims(&encoder.cfg, &head_cfg)?;
        let head = HeadWeights::init(&head_cfg, head_seed)?;
        Ok(Self {
            encoder,
            head_cfg,
            head,
        })
    }

    /// Toy-sized model with a seeded random encoder.
    pub fn toy(encoder_seed: u64, head_seed: u64) -> Result<Self> {
        Self::new(
            FrozenEncoder::random(EncoderConfig::toy(), encoder_seed)?,
            HeadConfig::toy(),
            head_seed,
        )
    }

    pub fn image_size(&self) -> usize {
        self.encoder.cfg.image_size
    }

    /// Patch features of a preprocessed `3×S×S` image.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.encoder.encode(image)
    }

    pub fn probmap_from_features(&self, features: &Tensor) -> Result<ProbMap> {
        let mut g = Eager;
        let logits = head_forward(&mut g, features, &self.head_cfg, &self.head)?;
        let s = self.image_size();
        ProbMap::new(logits_to_probmap(&mut g, &logits, s, s)?)
    }

    pub fn predict_features(&self, features: &Tensor) -> Result<(ProbMap, BinaryMask)> {
        let pm = self.probmap_from_features(features)?;
        let mask = predict_mask(&pm, FOREGROUND)?;
        Ok((pm, mask))
    }

    pub fn predict(&self, image: &Tensor) -> Result<(ProbMap, BinaryMask)> {
        self.predict_features(&self.features(image)?)
    }

    /// Loss of one image on a fresh tape, plus gradients of every head
    /// parameter.
    pub fn loss_and_grads(&self, features: &Tensor, gt: &GroundTruth, loss: &LossConfig) -> Result<LossGrad> {
        let mut tape = Tape::new();
        let logits = head_forward(&mut tape, features, &self.head_cfg, &self.head)?;
        let s = self.image_size();
        let pm = logits_to_probmap(&mut tape, &logits, s, s)?;
        let l = segmentation_loss(&mut tape, &pm, gt, loss)?;
        let value = tape.value(l).item()?;
        let grads = tape.backward(l)?;
        Ok(LossGrad { loss: value, grads })
    }

    /// Loss without building a tape.
    pub fn loss(&self, features: &Tensor, gt: &GroundTruth, loss: &LossConfig) -> Result<f64> {
        let mut g = Eager;
        let logits = head_forward(&mut g, features, &self.head_cfg, &self.head)?;
        let s = self.image_size();
        let pm = logits_to_probmap(&mut g, &logits, s, s)?;
        segmentation_loss(&mut g, &pm, gt, loss)?.item()
    }

    /// Head weights plus the configuration and encoder fingerprint needed to
    /// rebuild the model.
    pub fn checkpoint(&self) -> Result<WeightContainer> {
        let mut c = self.head.to_container();
        c.metadata
            .insert("encoder_config".into(), serde_json::to_string(&self.encoder.cfg)?);
        c.metadata
            .insert("head_config".into(), serde_json::to_string(&self.head_cfg)?);
        c.metadata
            .insert("encoder_checksum".into(), format!("{:016x}", self.encoder.checksum()));
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path, DType::F64)
    }

    /// Rebuilds a model from a head checkpoint and the encoder it was trained
    /// on. A different encoder is a contract error.
    pub fn from_checkpoint(c: &WeightContainer, encoder: FrozenEncoder) -> Result<Self> {
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .ok_or_else(|| Error::Schema(format!("checkpoint metadata lacks `{k}`")))
        };
        let enc_cfg: EncoderConfig = serde_json::from_str(meta("encoder_config")?)?;
        if enc_cfg != encoder.cfg {
            return Err(Error::Contract("checkpoint was trained with a different encoder configuration".into()));
        }
        let want = meta("encoder_checksum")?;
        let have = format!("{:016x}", encoder.checksum());
        if *want != have {
            return Err(Error::Contract(format!(
                "checkpoint expects encoder checksum {want}, got {have}"
            )));
        }
        let head_cfg: HeadConfig = serde_json::from_str(meta("head_config")?)?;
        check_dims(&encoder.cfg, &head_cfg)?;
        let head = HeadWeights::from_container(c, &head_cfg)?;
        Ok(Self {
            encoder,
            head_cfg,
            head,
        })
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, encoder: FrozenEncoder) -> Result<Self> {
        Self::from_checkpoint(&WeightContainer::load(path)?, encoder)
    }

    /// Encoder configuration recorded in a checkpoint.
    pub fn checkpoint_encoder_config(c: &WeightContainer) -> Result<EncoderConfig> {
        let s = c
            .metadata
            .get("encoder_config")
            .ok_or_else(|| Error::Schema("checkpoint metadata lacks `encoder_config`".into()))?;
        Ok(serde_json::from_str(s)?)
    }
}

fn check_dims(enc: &EncoderConfig, head: &HeadConfig) -> Result<()> {
    enc.validate()?;
    head.validate()?;
    if enc.embed_dim != head.embed_dim {
        return Err(Error::Config(format!(
            "head width {} does not match encoder width {}",
            head.embed_dim, enc.embed_dim
        )));
    }
    Ok(())
}

//! Training objectives: soft Dice, clamped binary cross-entropy and their
//! unweighted sum. Every loss is written against [`Graph`], so the same code
//! gives plain values under [`Eager`] and differentiable nodes under a tape.

use serde::{Deserialize, Serialize};

use crate::decoder::FOREGROUND;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Eager, Graph, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1.0;
pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

/// Foreground probabilities `[H×W]`, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrediction(Tensor);

impl SoftPrediction {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::Argument(format!(
                "prediction must be H×W, got {:?}",
                probs.shape()
            )));
        }
        if let Some(v) = probs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self(probs))
    }

    /// Hard mask as a `{0, 1}` prediction.
    pub fn from_mask(m: &BinaryMask) -> Self {
        Self(Tensor::new(vec![m.height(), m.width()], m.to_f64()).expect("mask shape"))
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }
}

/// Binary ground-truth labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth(BinaryMask);

impl GroundTruth {
    pub fn new(labels: BinaryMask) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &BinaryMask {
        &self.0
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.0.height(), self.0.width()], self.0.to_f64()).expect("mask shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Dice,
    Bce,
    /// Dice + BCE, the default training objective.
    #[default]
    DiceBce,
    /// Multi-class cross-entropy over the full probability map.
    Ce,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(Self::Dice),
            "bce" => Ok(Self::Bce),
            "dice-bce" | "dice+bce" => Ok(Self::DiceBce),
            "ce" => Ok(Self::Ce),
            _ => Err(Error::Config(format!("unknown loss mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub smooth: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::DiceBce,
            smooth: DEFAULT_SMOOTH,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

fn check_shape(pred: &Tensor, gt: &BinaryMask) -> Result<()> {
    if pred.shape() != [gt.height(), gt.width()] {
        return Err(Error::Argument(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            [gt.height(), gt.width()]
        )));
    }
    Ok(())
}

/// `1 − (2Σŷy + s) / (Σŷ² + Σy + s)`.
///
/// On `{0, 1}` predictions `Σŷy = TP` and `Σŷ² + Σy = 2TP + FP + FN`, so
/// with `s = 0` this is exactly one minus the Dice score. A zero denominator
/// (only possible with `s = 0`, empty ground truth and an all-zero
/// prediction) is a perfect match and yields a constant 0.
pub fn dice_loss_on<G: Graph>(
    g: &mut G,
    pred: &G::Value,
    gt: &GroundTruth,
    smooth: f64,
) -> Result<G::Value> {
    check_shape(g.value(pred), gt.labels())?;
    let y_t = gt.as_tensor();
    let y_sum = gt.labels().count() as f64;
    let y = g.constant(y_t);

    let p_y = g.mul(pred, &y)?;
    let tp = g.sum(&p_y);
    let p_sq = g.mul(pred, pred)?;
    let p_sq = g.sum(&p_sq);

    let two_tp = g.scale(&tp, 2.0);
    let num = g.add_scalar(&two_tp, smooth);
    let den = g.add_scalar(&p_sq, y_sum + smooth);
    if g.value(&den).data()[0] == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ratio = g.div(&num, &den)?;
    let neg_ratio = g.scale(&ratio, -1.0);
    Ok(g.add_scalar(&neg_ratio, 1.0))
}

/// `−(1/n) Σ [y log ŷ + (1−y) log(1−ŷ)]`, `ŷ` clamped to `[ε, 1−ε]`.
pub fn bce_loss_on<G: Graph>(
    g: &mut G,
    pred: &G::Value,
    gt: &GroundTruth,
    clamp_eps: f64,
) -> Result<G::Value> {
    check_shape(g.value(pred), gt.labels())?;
    if !(clamp_eps > 0.0 && clamp_eps < 0.5) {
        return Err(Error::Argument(format!("clamp_eps {clamp_eps} outside (0, 0.5)")));
    }
    let y_t = gt.as_tensor();
    let n = y_t.numel() as f64;
    let not_y_t = Tensor::from_fn(y_t.shape(), |i| 1.0 - y_t.data()[i]);
    let y = g.constant(y_t);
    let not_y = g.constant(not_y_t);

    let pc = g.clamp(pred, clamp_eps, 1.0 - clamp_eps);
    let log_p = g.ln(&pc)?;
    let neg = g.scale(&pc, -1.0);
    let one_minus = g.add_scalar(&neg, 1.0);
    let log_q = g.ln(&one_minus)?;
    let a = g.mul(&y, &log_p)?;
    let b = g.mul(&not_y, &log_q)?;
    let s = g.add(&a, &b)?;
    let s = g.sum(&s);
    Ok(g.scale(&s, -1.0 / n))
}

/// Unweighted sum of [`dice_loss_on`] and [`bce_loss_on`].
pub fn total_loss_on<G: Graph>(
    g: &mut G,
    pred: &G::Value,
    gt: &GroundTruth,
    smooth: f64,
    clamp_eps: f64,
) -> Result<G::Value> {
    let d = dice_loss_on(g, pred, gt, smooth)?;
    let b = bce_loss_on(g, pred, gt, clamp_eps)?;
    g.add(&d, &b)
}

/// Pixel-mean cross-entropy of a `[K×H×W]` probability map against the
/// class-index labels `gt ? FOREGROUND : BACKGROUND`.
pub fn ce_loss_on<G: Graph>(
    g: &mut G,
    probmap: &G::Value,
    gt: &GroundTruth,
    clamp_eps: f64,
) -> Result<G::Value> {
    let shape = g.value(probmap).shape().to_vec();
    let labels = gt.labels();
    if shape.len() != 3 || shape[1..] != [labels.height(), labels.width()] || shape[0] <= FOREGROUND {
        return Err(Error::Argument(format!(
            "probability map {shape:?} does not match ground truth {:?}",
            labels.shape()
        )));
    }
    let n = (labels.height() * labels.width()) as f64;
    let mut total: Option<G::Value> = None;
    for k in 0..shape[0] {
        let onehot = Tensor::new(
            vec![labels.height(), labels.width()],
            labels
                .data()
                .iter()
                .map(|&v| {
                    let cls = if v { FOREGROUND } else { 0 };
                    if cls == k {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        )?;
        if onehot.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let plane = g.select(probmap, k)?;
        let pc = g.clamp(&plane, clamp_eps, 1.0);
        let lp = g.ln(&pc)?;
        let oh = g.constant(onehot);
        let term = g.mul(&oh, &lp)?;
        let term = g.sum(&term);
        total = Some(match total {
            None => term,
            Some(t) => g.add(&t, &term)?,
        });
    }
    let total = total.expect("every pixel belongs to some class");
    Ok(g.scale(&total, -1.0 / n))
}

/// Loss of one image's `[K×H×W]` probability map under `cfg`.
pub fn segmentation_loss<G: Graph>(
    g: &mut G,
    probmap: &G::Value,
    gt: &GroundTruth,
    cfg: &LossConfig,
) -> Result<G::Value> {
    if cfg.mode == LossMode::Ce {
        return ce_loss_on(g, probmap, gt, cfg.clamp_eps);
    }
    let fg = g.select(probmap, FOREGROUND)?;
    match cfg.mode {
        LossMode::Dice => dice_loss_on(g, &fg, gt, cfg.smooth),
        LossMode::Bce => bce_loss_on(g, &fg, gt, cfg.clamp_eps),
        LossMode::DiceBce => total_loss_on(g, &fg, gt, cfg.smooth, cfg.clamp_eps),
        LossMode::Ce => unreachable!(),
    }
}

pub fn dice_loss(pred: &SoftPrediction, gt: &GroundTruth, smooth: f64) -> Result<f64> {
    dice_loss_on(&mut Eager, pred.probs(), gt, smooth)?.item()
}

pub fn bce_loss(pred: &SoftPrediction, gt: &GroundTruth, clamp_eps: f64) -> Result<f64> {
    bce_loss_on(&mut Eager, pred.probs(), gt, clamp_eps)?.item()
}

/// Dice + BCE with the default smoothing and clamp.
pub fn total_loss(pred: &SoftPrediction, gt: &GroundTruth) -> Result<f64> {
    total_loss_on(&mut Eager, pred.probs(), gt, DEFAULT_SMOOTH, DEFAULT_CLAMP_EPS)?.item()
}

//! Cross-domain comparison post-processing: cubic resize of the prediction
//! back to the original image size, a fixed window around the optic-disc
//! centre, cubic resize of the window to a fixed output, then thresholding.

use serde::{Deserialize, Serialize};

use super::resize::cubic_resize_plane;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const DG_CROP: usize = 800;
pub const DG_OUTPUT: usize = 256;

/// Where the crop window is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdCentreSource {
    /// Centroid of the ground-truth mask.
    #[default]
    GroundTruth,
    /// Centroid of the predicted mask at original size.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgPostprocess {
    pub crop: usize,
    pub output: usize,
    pub centre: OdCentreSource,
}

impl Default for DgPostprocess {
    fn default() -> Self {
        Self {
            crop: DG_CROP,
            output: DG_OUTPUT,
            centre: OdCentreSource::GroundTruth,
        }
    }
}

/// First index of a `crop`-long window centred at `centre` on an axis of
/// length `n`. The window is shifted to stay inside the axis; when the axis
/// is shorter than the window it overhangs both ends as evenly as the
/// centre allows and the overhang reads as background.
pub fn window_start(centre: f64, crop: usize, n: usize) -> isize {
    let start = (centre - crop as f64 / 2.0).round() as isize;
    let (a, b) = (0isize, n as isize - crop as isize);
    start.clamp(a.min(b), a.max(b))
}

/// Soft map at original size, before cropping.
pub fn to_original(map: &Tensor, original: (usize, usize)) -> Result<Tensor> {
    let [h, w] = map.shape()[..] else {
        return Err(Error::Argument(format!("expected an H×W map, got {:?}", map.shape())));
    };
    let data = cubic_resize_plane(map.data(), h, w, original.0, original.1);
    Tensor::new(vec![original.0, original.1], data)
}

/// Full chain on a soft `H×W` foreground map (hard masks go in as 0/1).
/// Values are clamped to `[0, 1]` after the first resize, since cubic
/// overshoot can leave that range, and the output is `map > 0.5`.
pub fn postprocess_dg(
    map: &Tensor,
    original: (usize, usize),
    od_centre: Option<(f64, f64)>,
    cfg: &DgPostprocess,
) -> Result<BinaryMask> {
    let (cy, cx) = od_centre.ok_or_else(|| Error::Argument("post-processing needs a disc centre".into()))?;
    if cfg.crop == 0 || cfg.output == 0 {
        return Err(Error::Argument("crop and output sizes must be positive".into()));
    }
    let full = to_original(map, original)?;
    let (h, w) = original;
    let (top, left) = (window_start(cy, cfg.crop, h), window_start(cx, cfg.crop, w));
    let n = cfg.crop;
    let mut window = vec![0.0; n * n];
    for r in 0..n {
        let sr = top + r as isize;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..n {
            let sc = left + c as isize;
            if sc >= 0 && sc < w as isize {
                window[r * n + c] = full.data()[sr as usize * w + sc as usize].clamp(0.0, 1.0);
            }
        }
    }
    let out = cubic_resize_plane(&window, n, n, cfg.output, cfg.output);
    BinaryMask::new(cfg.output, cfg.output, out.into_iter().map(|v| v > 0.5).collect())
}

/// [`postprocess_dg`] for a hard mask.
pub fn postprocess_mask_dg(
    mask: &BinaryMask,
    original: (usize, usize),
    od_centre: Option<(f64, f64)>,
    cfg: &DgPostprocess,
) -> Result<BinaryMask> {
    let t = Tensor::new(vec![mask.height(), mask.width()], mask.to_f64())?;
    postprocess_dg(&t, original, od_centre, cfg)
}

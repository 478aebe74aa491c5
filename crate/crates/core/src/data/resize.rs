//! Separable resampling with half-pixel centres: output pixel `i` samples
//! the input at `(i + 0.5)·in/out − 0.5`. Borders clamp and there is no
//! antialiasing on downscale.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Keys cubic convolution parameter (Catmull-Rom).
pub const CUBIC_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four clamped source indices and weights per output coordinate.
fn cubic_taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let x = (i as f64 + 0.5) * scale - 0.5;
            let x0 = x.floor();
            let t = x - x0;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as f64 - 1.0;
                let j = (x0 + off).clamp(0.0, (input - 1) as f64) as usize;
                idx[k] = j;
                w[k] = cubic_kernel(t - off);
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic resize of one `h×w` plane.
pub fn cubic_resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let tx = cubic_taps(w, ow);
    let ty = cubic_taps(h, oh);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for (c, (idx, wt)) in tx.iter().enumerate() {
            tmp[r * ow + c] = (0..4).map(|k| wt[k] * row[idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (r, (idx, wt)) in ty.iter().enumerate() {
        let dst = &mut out[r * ow..(r + 1) * ow];
        for k in 0..4 {
            let s = &tmp[idx[k] * ow..(idx[k] + 1) * ow];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += wt[k] * v;
            }
        }
    }
    out
}

/// Bicubic resize of a `C×H×W` tensor, channel by channel.
pub fn resize_cubic(image: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Argument(format!(
            "cubic resize expects C×H×W, got {:?}",
            image.shape()
        )));
    };
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Argument("cannot resize to or from an empty image".into()));
    }
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        data.extend(cubic_resize_plane(
            &image.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            oh,
            ow,
        ));
    }
    Tensor::new(vec![c, oh, ow], data)
}

/// Nearest-neighbour resize, so a mask stays binary.
pub fn resize_nearest(mask: &BinaryMask, oh: usize, ow: usize) -> BinaryMask {
    let (h, w) = mask.shape();
    let pick = |i: usize, input: usize, output: usize| {
        (((i as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    BinaryMask::from_fn(oh, ow, |r, c| mask.get(pick(r, h, oh), pick(c, w, ow)))
}

pub const ZSCORE_MIN_STD: f64 = 1e-8;

/// Per-channel standardization to zero mean and unit (population) standard
/// deviation; the deviation is clamped below at [`ZSCORE_MIN_STD`].
pub fn zscore(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::Argument(format!(
            "z-score expects C×H×W, got {:?}",
            image.shape()
        )));
    }
    let plane = image.shape()[1] * image.shape()[2];
    let mut out = image.data().to_vec();
    for ch in out.chunks_mut(plane.max(1)) {
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(ZSCORE_MIN_STD);
        for v in ch.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

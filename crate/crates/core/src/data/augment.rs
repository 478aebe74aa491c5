//! Training-time augmentation.
//!
//! A regime is expanded into a concrete list of [`AugmentOp`]s by a
//! per-sample RNG seeded from `(spec.seed, sample.id)`, then the ops are
//! applied in order. Geometric ops move image and mask together (image
//! bilinear, mask nearest, zero fill). Photometric ops touch the image only
//! and clamp to the raw pixel range. No op crops or resizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FundusSample, PIXEL_MAX};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{derive_seed, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    None,
    /// Random rotation and flips.
    Spatial,
    /// Stacked photometric and geometric transforms.
    Dst,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "spatial" => Ok(Self::Spatial),
            "dst" => Ok(Self::Dst),
            _ => Err(Error::Config(format!("unknown augmentation regime `{s}`"))),
        }
    }
}

/// Parameter ranges. Fractions are relative to the raw pixel range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Rotation angle is uniform in `[−max, max]` degrees.
    pub rotation_max_degrees: f64,
    pub flip_probability: f64,
    /// Probability of each stacked transform.
    pub op_probability: f64,
    pub filter_sigma: (f64, f64),
    pub sharpen_amount: f64,
    pub noise_std_max: f64,
    pub brightness_max: f64,
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
    pub elastic_std_max: f64,
    pub elastic_sigma: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_max_degrees: 180.0,
            flip_probability: 0.5,
            op_probability: 0.5,
            filter_sigma: (0.25, 1.5),
            sharpen_amount: 1.0,
            noise_std_max: 0.05,
            brightness_max: 0.2,
            contrast: (0.8, 1.2),
            gamma: (0.7, 1.5),
            elastic_std_max: 4.0,
            elastic_sigma: 16.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub regime: Regime,
    pub seed: u64,
    pub params: AugmentParams,
}

impl AugmentationSpec {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            seed,
            params: AugmentParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum AugmentOp {
    /// Counter-clockwise rotation about the image centre.
    Rotate { degrees: f64 },
    FlipHorizontal,
    FlipVertical,
    /// Unsharp masking `x + amount·(x − blur_σ(x))`.
    Sharpen { sigma: f64, amount: f64 },
    Blur { sigma: f64 },
    /// Additive Gaussian noise, `std` as a fraction of the pixel range.
    Noise { std: f64, seed: u64 },
    /// Additive shift as a fraction of the pixel range.
    Brightness { shift: f64 },
    /// Scales deviations from each channel's mean.
    Contrast { factor: f64 },
    /// `x ↦ max·(x/max)^γ`.
    Gamma { gamma: f64 },
    /// Smooth random displacement field with the given per-axis std (px).
    Elastic { std: f64, sigma: f64, seed: u64 },
}

impl AugmentOp {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            Self::Rotate { .. } | Self::FlipHorizontal | Self::FlipVertical | Self::Elastic { .. }
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// The concrete op list `spec` produces for the sample `id`.
pub fn plan(spec: &AugmentationSpec, id: &str) -> Vec<AugmentOp> {
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, id));
    let rot = p.rotation_max_degrees;
    let mut ops = Vec::new();
    match spec.regime {
        Regime::None => {}
        Regime::Spatial => {
            ops.push(AugmentOp::Rotate {
                degrees: uniform(&mut rng, (-rot, rot)),
            });
            if rng.gen::<f64>() < p.flip_probability {
                ops.push(AugmentOp::FlipHorizontal);
            }
            if rng.gen::<f64>() < p.flip_probability {
                ops.push(AugmentOp::FlipVertical);
            }
        }
        Regime::Dst => {
            let coin = |rng: &mut ChaCha8Rng| rng.gen::<f64>() < p.op_probability;
            if coin(&mut rng) {
                ops.push(AugmentOp::Sharpen {
                    sigma: uniform(&mut rng, p.filter_sigma),
                    amount: p.sharpen_amount,
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Blur {
                    sigma: uniform(&mut rng, p.filter_sigma),
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Noise {
                    std: uniform(&mut rng, (0.0, p.noise_std_max)),
                    seed: rng.gen(),
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Brightness {
                    shift: uniform(&mut rng, (-p.brightness_max, p.brightness_max)),
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Contrast {
                    factor: uniform(&mut rng, p.contrast),
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Gamma {
                    gamma: uniform(&mut rng, p.gamma),
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Rotate {
                    degrees: uniform(&mut rng, (-rot, rot)),
                });
            }
            if coin(&mut rng) {
                ops.push(AugmentOp::Elastic {
                    std: uniform(&mut rng, (0.0, p.elastic_std_max)),
                    sigma: p.elastic_sigma,
                    seed: rng.gen(),
                });
            }
        }
    }
    ops
}

/// Applies the regime's ops to a sample. Regime `None` returns an exact copy.
pub fn augment(sample: &FundusSample, spec: &AugmentationSpec) -> FundusSample {
    apply_ops(sample, &plan(spec, &sample.id))
}

pub fn apply_ops(sample: &FundusSample, ops: &[AugmentOp]) -> FundusSample {
    let mut out = sample.clone();
    for op in ops {
        apply_op(&mut out, op);
    }
    if ops.iter().any(AugmentOp::is_geometric) {
        out.od_centre = out.mask.centroid();
    }
    out
}

fn apply_op(s: &mut FundusSample, op: &AugmentOp) {
    let (h, w) = s.mask.shape();
    match *op {
        AugmentOp::Rotate { degrees } => {
            let (sin, cos) = degrees.to_radians().sin_cos();
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            // Inverse map: destination pixel centre back into the source.
            warp(s, |r, c| {
                let y = r as f64 + 0.5 - cy;
                let x = c as f64 + 0.5 - cx;
                let sx = cos * x - sin * y;
                let sy = sin * x + cos * y;
                (sy + cy - 0.5, sx + cx - 0.5)
            });
        }
        AugmentOp::FlipHorizontal => permute(s, |r, c| (r, w - 1 - c)),
        AugmentOp::FlipVertical => permute(s, |r, c| (h - 1 - r, c)),
        AugmentOp::Sharpen { sigma, amount } => {
            let blurred = gaussian_blur(&s.image, sigma);
            photometric(s, |i, x| x + amount * (x - blurred.data()[i]));
        }
        AugmentOp::Blur { sigma } => {
            s.image = gaussian_blur(&s.image, sigma);
        }
        AugmentOp::Noise { std, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, std * PIXEL_MAX).expect("finite std");
            photometric(s, |_, x| x + n.sample(&mut rng));
        }
        AugmentOp::Brightness { shift } => photometric(s, |_, x| x + shift * PIXEL_MAX),
        AugmentOp::Contrast { factor } => {
            let plane = h * w;
            let means: Vec<f64> = s
                .image
                .data()
                .chunks(plane.max(1))
                .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                .collect();
            photometric(s, |i, x| {
                let m = means[i / plane];
                m + factor * (x - m)
            });
        }
        AugmentOp::Gamma { gamma } => {
            photometric(s, |_, x| PIXEL_MAX * (x.max(0.0) / PIXEL_MAX).powf(gamma))
        }
        AugmentOp::Elastic { std, sigma, seed } => {
            let (dy, dx) = displacement_field(h, w, std, sigma, seed);
            warp(s, |r, c| {
                let i = r * w + c;
                (r as f64 + dy[i], c as f64 + dx[i])
            });
        }
    }
}

fn photometric(s: &mut FundusSample, mut f: impl FnMut(usize, f64) -> f64) {
    for (i, v) in s.image.data_mut().iter_mut().enumerate() {
        *v = f(i, *v).clamp(0.0, PIXEL_MAX);
    }
}

fn permute(s: &mut FundusSample, src: impl Fn(usize, usize) -> (usize, usize)) {
    let (h, w) = s.mask.shape();
    let img = &s.image;
    s.image = Tensor::from_fn(img.shape(), |i| {
        let (ch, r, c) = (i / (h * w), i / w % h, i % w);
        let (sr, sc) = src(r, c);
        img.at3(ch, sr, sc)
    });
    let m = &s.mask;
    s.mask = BinaryMask::from_fn(h, w, |r, c| {
        let (sr, sc) = src(r, c);
        m.get(sr, sc)
    });
}

/// Resamples image (bilinear) and mask (nearest) through a destination →
/// source map in index coordinates. Samples outside the image read as 0.
fn warp(s: &mut FundusSample, src: impl Fn(usize, usize) -> (f64, f64)) {
    let (h, w) = s.mask.shape();
    let mut coords = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            coords.push(src(r, c));
        }
    }
    let img = &s.image;
    let channels = img.shape()[0];
    let mut data = Vec::with_capacity(img.numel());
    for ch in 0..channels {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let at = |r: isize, c: isize| {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                0.0
            } else {
                plane[r as usize * w + c as usize]
            }
        };
        for &(y, x) in &coords {
            let (y0, x0) = (y.floor(), x.floor());
            let (ty, tx) = (y - y0, x - x0);
            let (r0, c0) = (y0 as isize, x0 as isize);
            let v = (1.0 - ty) * ((1.0 - tx) * at(r0, c0) + tx * at(r0, c0 + 1))
                + ty * ((1.0 - tx) * at(r0 + 1, c0) + tx * at(r0 + 1, c0 + 1));
            data.push(v);
        }
    }
    s.image = Tensor::new(img.shape().to_vec(), data).expect("same shape");
    let m = &s.mask;
    s.mask = BinaryMask::from_fn(h, w, |r, c| {
        let (y, x) = coords[r * w + c];
        let (ry, rx) = (y.round(), x.round());
        ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w && m.get(ry as usize, rx as usize)
    });
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter of one plane with clamped borders.
fn blur_plane(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * src[r * w + clampi(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clampi(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let kernel = gaussian_kernel(sigma);
    let data = image
        .data()
        .chunks(h * w)
        .flat_map(|ch| blur_plane(ch, h, w, &kernel))
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Smoothed white-noise displacements rescaled to the requested std.
fn displacement_field(h: usize, w: usize, std: f64, sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = gaussian_kernel(sigma);
    let mut field = || {
        let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        blur_plane(&noise, h, w, &kernel)
    };
    let (mut dy, mut dx) = (field(), field());
    let n = (2 * h * w) as f64;
    let rms = (dy.iter().chain(&dx).map(|v| v * v).sum::<f64>() / n).sqrt();
    if rms > 0.0 {
        let k = std / rms;
        dy.iter_mut().chain(dx.iter_mut()).for_each(|v| *v *= k);
    }
    (dy, dx)
}

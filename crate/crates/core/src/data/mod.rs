//! Fundus image ingestion, pre-processing, augmentation and the
//! post-processing used for cross-domain comparison.
//!
//! Images are 8-bit RGB (PNG or PPM) held as `3×H×W` tensors of raw
//! `0..=255` values. Masks are single-channel PNGs where 0 is background and
//! 255 is optic disc; any value ≥ 128 is read as foreground.

pub mod augment;
pub mod manifest;
pub mod postprocess;
pub mod resize;

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub use augment::{apply_ops, augment, plan, AugmentOp, AugmentParams, AugmentationSpec, Regime};
pub use manifest::{split_train_val, train_count, DatasetManifest, ManifestEntry, Split};
pub use postprocess::{
    postprocess_dg, postprocess_mask_dg, to_original, window_start, DgPostprocess, OdCentreSource, DG_CROP, DG_OUTPUT,
};
pub use resize::{cubic_kernel, resize_cubic, resize_nearest, zscore, CUBIC_A};

/// Dynamic range of raw pixel values.
pub const PIXEL_MAX: f64 = 255.0;
/// Encoder input side length.
pub const DEFAULT_INPUT_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    pub id: String,
    /// Raw `3×H×W` pixels.
    pub image: Tensor,
    pub mask: BinaryMask,
    /// `(H, W)` of the image as stored on disk.
    pub original_size: (usize, usize),
    /// Optic-disc centre `(row, col)` in pixel-centre coordinates.
    pub od_centre: Option<(f64, f64)>,
    pub domain: String,
}

impl FundusSample {
    /// Builds a sample whose disc centre is the mask centroid.
    pub fn new(id: impl Into<String>, domain: impl Into<String>, image: Tensor, mask: BinaryMask) -> Result<Self> {
        let s = Self {
            id: id.into(),
            original_size: mask.shape(),
            od_centre: mask.centroid(),
            image,
            mask,
            domain: domain.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.mask.shape();
        if self.image.shape() != [3, h, w] {
            return Err(Error::Argument(format!(
                "sample `{}`: image {:?} does not match mask {h}×{w}",
                self.id,
                self.image.shape()
            )));
        }
        if let Some((r, c)) = self.od_centre {
            if !(0.0..=h as f64).contains(&r) || !(0.0..=w as f64).contains(&c) {
                return Err(Error::Argument(format!(
                    "sample `{}`: disc centre ({r}, {c}) outside the image",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.shape()
    }

    /// Loads an image/mask pair from disk.
    pub fn load(id: impl Into<String>, domain: impl Into<String>, image: &Path, mask: &Path) -> Result<Self> {
        Self::new(id, domain, load_image(image)?, load_mask(mask)?)
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

/// Reads an 8-bit image as a `3×H×W` tensor of raw values.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = p.0[ch] as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::from_fn(h, w, |r, c| img.get_pixel(c as u32, r as u32).0[0] >= 128))
}

/// Writes a `3×H×W` tensor as an 8-bit PNG, rounding and clamping to
/// `0..=255`.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::Argument(format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| image.at3(ch, y as usize, x as usize).round().clamp(0.0, PIXEL_MAX) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes a mask as a `{0, 255}` grayscale PNG.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Model-ready input: a normalized image and its resized mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: Tensor,
    pub mask: BinaryMask,
}

/// Cubic resize to `size×size`, then per-channel Z-score; the mask goes
/// through nearest-neighbour resizing.
pub fn preprocess(sample: &FundusSample, size: usize) -> Result<Preprocessed> {
    sample.validate()?;
    let image = zscore(&resize_cubic(&sample.image, size, size)?)?;
    Ok(Preprocessed {
        image,
        mask: resize_nearest(&sample.mask, size, size),
    })
}

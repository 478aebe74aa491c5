//! Synthetic fundus-like images: a bright disc on a darker vignetted
//! background with pixel noise. Each domain has its own palette, so a
//! corpus mixing domains has a controllable appearance shift.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_image, save_mask, DatasetManifest, FundusSample, ManifestEntry, Split, PIXEL_MAX};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{derive_seed, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub name: String,
    pub background: [f64; 3],
    pub disc: [f64; 3],
    pub noise_std: f64,
    /// Disc radius range as a fraction of the image side.
    pub radius: (f64, f64),
    /// Maximum centre offset from the image centre, as a fraction of the side.
    pub centre_jitter: f64,
}

impl SyntheticDomain {
    /// Orange retina, pale yellow disc.
    pub fn warm(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            background: [170.0, 70.0, 30.0],
            disc: [250.0, 220.0, 150.0],
            noise_std: 6.0,
            radius: (0.18, 0.3),
            centre_jitter: 0.12,
        }
    }

    /// Greenish retina where the disc stands out mostly in the blue channel.
    pub fn cool(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            background: [90.0, 140.0, 60.0],
            disc: [100.0, 150.0, 230.0],
            noise_std: 10.0,
            radius: (0.18, 0.3),
            centre_jitter: 0.12,
        }
    }

    /// Palette `i` of a fixed rotation of distinct looks.
    pub fn preset(i: usize) -> Self {
        let name = format!("domain{i}");
        match i % 4 {
            0 => Self::warm(name),
            1 => Self::cool(name),
            2 => Self {
                background: [120.0, 40.0, 60.0],
                disc: [200.0, 160.0, 200.0],
                ..Self::warm(name)
            },
            _ => Self {
                background: [60.0, 60.0, 60.0],
                disc: [160.0, 160.0, 160.0],
                noise_std: 14.0,
                ..Self::warm(name)
            },
        }
    }
}

/// Renders one image with a disc of the given centre and radius (pixels).
pub fn render(
    id: impl Into<String>,
    domain: &SyntheticDomain,
    size: usize,
    centre: (f64, f64),
    radius: f64,
    seed: u64,
) -> Result<FundusSample> {
    let mask = BinaryMask::disc(size, size, centre, radius);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, domain.noise_std.max(0.0)).expect("finite std");
    let half = size as f64 / 2.0;
    let mut data = vec![0.0; 3 * size * size];
    for r in 0..size {
        for c in 0..size {
            let y = (r as f64 + 0.5 - half) / half;
            let x = (c as f64 + 0.5 - half) / half;
            let vignette = 1.0 - 0.35 * (x * x + y * y).min(1.0);
            let inside = mask.get(r, c);
            for ch in 0..3 {
                let base = if inside {
                    domain.disc[ch]
                } else {
                    domain.background[ch] * vignette
                };
                let v = base + noise.sample(&mut rng);
                data[ch * size * size + r * size + c] = v.clamp(0.0, PIXEL_MAX);
            }
        }
    }
    FundusSample::new(id, domain.name.clone(), Tensor::new(vec![3, size, size], data)?, mask)
}

/// Random disc placement drawn from the domain's ranges.
pub fn random_sample(id: &str, domain: &SyntheticDomain, size: usize, seed: u64) -> Result<FundusSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id));
    let s = size as f64;
    let (lo, hi) = domain.radius;
    let radius = s * (lo + (hi - lo) * rng.gen::<f64>());
    let j = domain.centre_jitter * s;
    let centre = (
        s / 2.0 + j * (2.0 * rng.gen::<f64>() - 1.0),
        s / 2.0 + j * (2.0 * rng.gen::<f64>() - 1.0),
    );
    render(id, domain, size, centre, radius, rng.gen())
}

/// `n` centred discs with radii evenly spaced over `[0.27, 0.36]·size`.
pub fn centred_discs(n: usize, size: usize, seed: u64) -> Result<Vec<FundusSample>> {
    let domain = SyntheticDomain::warm("toy");
    let s = size as f64;
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let radius = s * (0.27 + 0.09 * t);
            let id = format!("disc{i}");
            render(id.clone(), &domain, size, (s / 2.0, s / 2.0), radius, derive_seed(seed, &id))
        })
        .collect()
}

/// Writes samples as PNG pairs under `dir` and returns a manifest for them.
pub fn write_corpus(dir: &Path, samples: &[(FundusSample, Split)]) -> Result<DatasetManifest> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (s, split) in samples {
        let stem = s.id.replace('/', "_");
        let image = Path::new("images").join(format!("{stem}.png"));
        let mask = Path::new("masks").join(format!("{stem}.png"));
        save_image(&s.image, &dir.join(&image))?;
        save_mask(&s.mask, &dir.join(&mask))?;
        entries.push(ManifestEntry {
            image,
            mask,
            split: *split,
            domain: s.domain.clone(),
        });
    }
    Ok(DatasetManifest {
        entries,
        split_seed: None,
        root: dir.to_path_buf(),
    })
}

/// A multi-domain corpus with `train`/`test` samples per domain.
pub fn corpus(
    domains: &[SyntheticDomain],
    train: usize,
    test: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(FundusSample, Split)>> {
    let mut out = Vec::new();
    for d in domains {
        for i in 0..train + test {
            let split = if i < train { Split::Train } else { Split::Test };
            let id = format!("{}_{i:03}", d.name);
            out.push((random_sample(&id, d, size, seed)?, split));
        }
    }
    Ok(out)
}

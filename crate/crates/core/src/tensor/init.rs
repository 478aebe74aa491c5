use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Default standard deviation for truncated-normal weight initialization.
pub const TRUNC_NORMAL_STD: f64 = 0.02;

/// Samples `N(mean, std²)` with rejection outside `mean ± bound`.
pub fn truncated_normal_init(
    shape: &[usize],
    mean: f64,
    std: f64,
    bound: f64,
    seed: u64,
) -> Result<Tensor> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("std must be positive, got {std}")));
    }
    if !(bound > 0.0) {
        return Err(Error::Argument(format!(
            "truncation bound must be positive, got {bound}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape, |_| sample_truncated(&mut rng, std, bound) + mean))
}

/// Derives an independent 64-bit seed for a labelled stream, so that e.g.
/// each parameter or each sample gets its own RNG regardless of the order
/// in which streams are created.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub(crate) fn sample_truncated(rng: &mut impl rand::Rng, std: f64, bound: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = z * std;
        if v.abs() <= bound {
            return v;
        }
    }
}

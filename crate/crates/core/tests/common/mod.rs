//! Independent reference implementations used as test oracles. Nothing in
//! here calls the optimized code paths it is compared against.
#![allow(dead_code)]

use discseg::mask::BinaryMask;
use discseg::model::SegModel;
use discseg::objectives::{GroundTruth, LossConfig};
use discseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Foreground pixels that touch background or the image edge, by direct
/// neighbour enumeration.
pub fn boundary_points(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = m.shape();
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize && m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if fg(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !fg(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

/// O(|a|·|b|) nearest Euclidean distances from each point of `a` to `b`.
pub fn brute_nearest(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter()
        .map(|&(r, c)| {
            b.iter()
                .map(|&(s, d)| {
                    let dr = r as f64 - s as f64;
                    let dc = c as f64 - d as f64;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// 95th percentile by the textbook nearest-rank definition: the smallest
/// value whose 1-based rank `k` satisfies `k ≥ 0.95·n`.
pub fn brute_p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    let k = (1..=n).find(|&k| 100 * k >= 95 * n).unwrap();
    d[k - 1]
}

pub fn brute_hd95(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    brute_p95(brute_nearest(a, b)).max(brute_p95(brute_nearest(b, a)))
}

pub fn brute_asd(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let d = brute_nearest(a, b);
    d.iter().sum::<f64>() / d.len() as f64
}

pub fn brute_dice(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.data().iter().zip(g.data()) {
        inter += (a && b) as usize;
        sp += a as usize;
        sg += b as usize;
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}

/// Random blobby mask: a few discs and rectangles plus sparse specks,
/// confined to rows/cols `[margin, size − margin)`.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, margin: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    let (lo_r, hi_r) = (margin, h - margin);
    let (lo_c, hi_c) = (margin, w - margin);
    let shapes = rng.gen_range(1..4);
    for _ in 0..shapes {
        let cr = rng.gen_range(lo_r..hi_r) as f64;
        let cc = rng.gen_range(lo_c..hi_c) as f64;
        let rad = rng.gen_range(1.0..(h.min(w) as f64 / 3.0).max(1.5));
        let disc = rng.gen_bool(0.6);
        for r in lo_r..hi_r {
            for c in lo_c..hi_c {
                let (dy, dx) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
                let inside = if disc {
                    dy * dy + dx * dx < rad * rad
                } else {
                    dy.abs() < rad && dx.abs() < 0.6 * rad
                };
                if inside {
                    m.set(r, c, true);
                }
            }
        }
    }
    let specks = rng.gen_range(0..6);
    for _ in 0..specks {
        m.set(rng.gen_range(lo_r..hi_r), rng.gen_range(lo_c..hi_c), true);
    }
    m
}

/// Uniformly random hard mask.
pub fn noise_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// Catmull-Rom weight, written from the piecewise definition.
fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x.powi(2) + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x.powi(2) - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// One output pixel of a half-pixel-centred bicubic resize evaluated as a
/// direct 4×4 sum with edge clamping.
pub fn cubic_probe(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, r: usize, c: usize) -> f64 {
    let y = (r as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
    let x = (c as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
    let (y0, x0) = (y.floor() as isize, x.floor() as isize);
    let mut acc = 0.0;
    for i in -1..=2isize {
        for j in -1..=2isize {
            let sr = (y0 + i).clamp(0, h as isize - 1) as usize;
            let sc = (x0 + j).clamp(0, w as isize - 1) as usize;
            let wt = catmull_rom(y - (y0 + i) as f64) * catmull_rom(x - (x0 + j) as f64);
            acc += wt * src[sr * w + sc];
        }
    }
    acc
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub directional_rel_err: f64,
}

pub struct GradCheckPlan {
    /// Tensors up to this many values are checked at every coordinate.
    pub exhaustive_up_to: usize,
    /// Random coordinates per larger tensor.
    pub sampled: usize,
    /// Largest-|gradient| coordinates per larger tensor.
    pub top: usize,
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
}

/// Central finite differences of the eager loss against the tape gradient
/// for every head parameter tensor.
pub fn check_head_gradients(
    model: &mut SegModel,
    features: &Tensor,
    gt: &GroundTruth,
    loss: &LossConfig,
    plan: &GradCheckPlan,
) -> Vec<ParamCheck> {
    let analytic = model.loss_and_grads(features, gt, loss).unwrap().grads;
    let mut rng = rng(plan.seed);
    let names: Vec<String> = model.head.parameters().iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let g = analytic
            .param(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .to_vec();
        let n = g.len();
        let coords: Vec<usize> = if n <= plan.exhaustive_up_to {
            (0..n).collect()
        } else {
            let mut by_mag: Vec<usize> = (0..n).collect();
            by_mag.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
            let mut c: Vec<usize> = by_mag[..plan.top].to_vec();
            c.extend((0..plan.sampled).map(|_| rng.gen_range(0..n)));
            c
        };
        let h = plan.step;
        let eval = |delta: &dyn Fn(usize) -> f64, sign: f64, model: &mut SegModel| {
            {
                let p = &mut model.head.parameters_mut()[pi];
                let v = p.values_mut().unwrap();
                for (i, x) in v.iter_mut().enumerate() {
                    *x += sign * delta(i);
                }
            }
            let l = model.loss(features, gt, loss).unwrap();
            {
                let p = &mut model.head.parameters_mut()[pi];
                let v = p.values_mut().unwrap();
                for (i, x) in v.iter_mut().enumerate() {
                    *x -= sign * delta(i);
                }
            }
            l
        };
        let mut max_rel: f64 = 0.0;
        for &i in &coords {
            let d = |j: usize| if j == i { h } else { 0.0 };
            let num = (eval(&d, 1.0, model) - eval(&d, -1.0, model)) / (2.0 * h);
            max_rel = max_rel.max(rel_err(g[i], num, plan.floor));
        }
        let dir: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let d = |j: usize| h * dir[j];
        let num = (eval(&d, 1.0, model) - eval(&d, -1.0, model)) / (2.0 * h);
        let ana: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        out.push(ParamCheck {
            name: name.clone(),
            numel: n,
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            directional_rel_err: rel_err(ana, num, plan.floor),
        });
    }
    out
}

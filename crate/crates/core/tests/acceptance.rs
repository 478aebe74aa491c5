//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Tolerances are fixed constants below.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use discseg::data::{
    apply_ops, augment, plan, postprocess_dg, postprocess_mask_dg, preprocess, resize_nearest, split_train_val,
    to_original, window_start, AugmentationSpec, DatasetManifest, DgPostprocess, ManifestEntry, Regime, Split,
    DG_CROP, DG_OUTPUT,
};
use discseg::metrics::{
    asd, confusion, dice_score, evaluate, extract_boundary, nearest_distances, AsdMode,
};
use discseg::model::SegModel;
use discseg::objectives::{bce_loss, dice_loss, total_loss, GroundTruth, LossConfig, SoftPrediction};
use discseg::synthetic::{centred_discs, render, SyntheticDomain};
use discseg::train::{compute_epochs, detect_grokking, encode_all, fit, fixed_batch_losses, mean_dice, TrainConfig};
use discseg::{BinaryMask, Tensor};
use rand::Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_FD_STEP: f64 = 1e-4;
const GRAD_REL_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const METRIC_TOL: f64 = 1e-12;
const METRIC_PAIRS: usize = 120;
const METRIC_BUDGET: Duration = Duration::from_secs(60);
const DUALITY_TOL: f64 = 1e-12;
const DUALITY_MASKS: usize = 1000;
const CLOSED_FORM_TOL: f64 = 1e-12;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_EPOCH_CAP: usize = 5000;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const RADIUS_TOL_PX: f64 = 1.0;
const GROK_STEP_EPOCH: usize = 1800;
const GROK_RAMPS: usize = 100;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grad_check() -> Outcome {
    let start = Instant::now();
    let mut model = SegModel::toy(11, 12).map_err(|e| e.to_string())?;
    let s = centred_discs(1, 32, 13).map_err(|e| e.to_string())?.remove(0);
    let p = preprocess(&s, 32).map_err(|e| e.to_string())?;
    let f = model.features(&p.image).map_err(|e| e.to_string())?;
    let gt = GroundTruth::new(p.mask);
    let plan = GradCheckPlan {
        exhaustive_up_to: 4096,
        sampled: 1024,
        top: 32,
        step: GRAD_FD_STEP,
        floor: GRAD_REL_FLOOR,
        seed: 14,
    };
    let checks = check_head_gradients(&mut model, &f, &gt, &LossConfig::default(), &plan);
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .map(|c| c.max_rel_err.max(c.directional_rel_err))
        .fold(0.0, f64::max);
    let coords: usize = checks.iter().map(|c| c.coords_checked).sum();
    let bad: Vec<_> = checks
        .iter()
        .filter(|c| c.max_rel_err >= GRAD_REL_TOL || c.directional_rel_err >= GRAD_REL_TOL)
        .map(|c| c.name.clone())
        .collect();
    ensure(bad.is_empty(), || format!("tensors over tolerance: {bad:?} (worst {worst:.2e})"))?;
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} tensors, {coords} coordinates + one direction each, max rel err {worst:.2e}, {:.1}s",
        checks.len(),
        elapsed.as_secs_f64()
    ))
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(21);
    let mut worst: f64 = 0.0;
    for i in 0..METRIC_PAIRS {
        let h = if i < 10 { 128 } else { rng.gen_range(4..=128) };
        let w = if i < 10 { 128 } else { rng.gen_range(4..=128) };
        let pred = random_mask(&mut rng, h, w, 0);
        let gt = random_mask(&mut rng, h, w, 0);
        let (pb, gb) = (boundary_points(&pred), boundary_points(&gt));
        let (ps, gs) = (extract_boundary(&pred).unwrap(), extract_boundary(&gt).unwrap());
        ensure(ps.points() == pb.as_slice() && gs.points() == gb.as_slice(), || {
            format!("pair {i}: boundary sets differ")
        })?;
        let r = evaluate(&pred, &gt).unwrap();
        ensure(r.dice == brute_dice(&pred, &gt), || format!("pair {i}: dice {} vs oracle", r.dice))?;
        let mut cmp = |name: &str, a: f64, b: f64| {
            worst = worst.max((a - b).abs());
            ensure((a - b).abs() <= METRIC_TOL, || format!("pair {i}: {name} {a} vs oracle {b}"))
        };
        cmp("hd95", r.hd95.unwrap(), brute_hd95(&pb, &gb))?;
        cmp("asd", r.asd.unwrap(), brute_asd(&pb, &gb))?;
        let sym = asd(&ps, &gs, AsdMode::Symmetric).unwrap();
        let (d1, d2) = (brute_nearest(&pb, &gb), brute_nearest(&gb, &pb));
        cmp("symmetric asd", sym, (d1.iter().sum::<f64>() + d2.iter().sum::<f64>()) / (d1.len() + d2.len()) as f64)?;
        for (a, b) in nearest_distances(&ps, &gs).unwrap().iter().zip(&d1) {
            cmp("nearest distance", *a, *b)?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < METRIC_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{METRIC_PAIRS} pairs up to 128x128, max |diff| {worst:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn duality() -> Outcome {
    let mut rng = rng(31);
    let mut worst: f64 = 0.0;
    for i in 0..DUALITY_MASKS {
        let (h, w) = (rng.gen_range(1..=48), rng.gen_range(1..=48));
        let p = rng.gen_range(0.0..1.0);
        let pred = noise_mask(&mut rng, h, w, p);
        let q = rng.gen_range(0.0..1.0);
        let gt = noise_mask(&mut rng, h, w, q);
        let l = dice_loss(&SoftPrediction::from_mask(&pred), &GroundTruth::new(gt.clone()), 0.0).unwrap();
        let d = dice_score(&confusion(&pred, &gt).unwrap());
        let err = (l + d - 1.0).abs();
        worst = worst.max(err);
        ensure(err <= DUALITY_TOL, || format!("mask {i}: loss {l} + dice {d} != 1"))?;
    }
    Ok(format!("{DUALITY_MASKS} mask pairs, max |loss + dice - 1| = {worst:.1e}"))
}

fn closed_forms() -> Outcome {
    let half = Tensor::full(&[16, 16], 0.5);
    let pred = SoftPrediction::new(half).unwrap();
    let gt = GroundTruth::new(BinaryMask::from_fn(16, 16, |r, _| r < 8));
    let bce = bce_loss(&pred, &gt, 1e-7).unwrap();
    let dice = dice_loss(&pred, &gt, 0.0).unwrap();
    let total = total_loss(&pred, &gt).unwrap();
    let ln2 = std::f64::consts::LN_2;
    ensure((bce - ln2).abs() <= CLOSED_FORM_TOL, || format!("bce {bce} vs ln 2"))?;
    ensure((dice - 1.0 / 3.0).abs() <= CLOSED_FORM_TOL, || format!("dice {dice} vs 1/3"))?;
    // 256 pixels, 128 foreground, smooth 1: 1 − 129/193.
    let total_expect = ln2 + 1.0 - 129.0 / 193.0;
    ensure((total - total_expect).abs() <= CLOSED_FORM_TOL, || format!("total {total} vs {total_expect}"))?;
    Ok(format!("bce - ln2 = {:.1e}, dice - 1/3 = {:.1e}", bce - ln2, dice - 1.0 / 3.0))
}

fn toy_overfit() -> Outcome {
    let start = Instant::now();
    let discs = centred_discs(8, 32, 41).map_err(|e| e.to_string())?;
    let mut model = SegModel::toy(1, 2).map_err(|e| e.to_string())?;
    let checksum = model.encoder.checksum();
    let cfg = TrainConfig {
        seed: 3,
        max_epochs: Some(OVERFIT_EPOCH_CAP),
        early_stop_dice: Some(OVERFIT_DICE),
        ..Default::default()
    };

    let enc = encode_all(&model, &discs).map_err(|e| e.to_string())?;
    let batch: Vec<_> = enc.iter().collect();
    let mut probe = model.clone();
    let losses = fixed_batch_losses(&mut probe, &batch, &cfg, 10).map_err(|e| e.to_string())?;
    ensure(losses.windows(2).all(|w| w[1] < w[0]), || format!("losses not strictly decreasing: {losses:?}"))?;

    let run = fit(&mut model, &discs, &discs, &cfg, None).map_err(|e| e.to_string())?;
    let planned = compute_epochs(8).unwrap().min(OVERFIT_EPOCH_CAP);
    ensure(run.planned_epochs == planned, || format!("planned {} epochs", run.planned_epochs))?;
    let dice = mean_dice(&model, &enc).map_err(|e| e.to_string())?;
    ensure(dice >= OVERFIT_DICE, || format!("train dice {dice} after {} epochs", run.records.len()))?;
    ensure(model.encoder.checksum() == checksum, || "encoder checksum changed".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < OVERFIT_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "train dice {dice:.4} at epoch {} of {planned}, first-10 losses {:.4} -> {:.4}, {:.1}s",
        run.records.len(),
        losses[0],
        losses[9],
        elapsed.as_secs_f64()
    ))
}

fn protocol_arithmetic() -> Outcome {
    let e201 = compute_epochs(201).unwrap();
    let e800 = compute_epochs(800).unwrap();
    ensure(e201 == 15_920, || format!("compute_epochs(201) = {e201}"))?;
    ensure(e800 == 4_000, || format!("compute_epochs(800) = {e800}"))?;
    let m = DatasetManifest {
        entries: (0..201)
            .map(|i| ManifestEntry {
                image: PathBuf::from(format!("i{i}.png")),
                mask: PathBuf::from(format!("m{i}.png")),
                split: Split::Train,
                domain: "d".into(),
            })
            .collect(),
        ..Default::default()
    };
    let s = split_train_val(&m, 7).unwrap();
    let (tr, va) = (s.count(Split::Train), s.count(Split::Val));
    ensure((tr, va) == (160, 41), || format!("split {tr}/{va}"))?;
    Ok(format!("epochs(201) = {e201}, epochs(800) = {e800}, split 201 -> {tr}/{va}"))
}

fn radius(m: &BinaryMask) -> f64 {
    (m.count() as f64 / std::f64::consts::PI).sqrt()
}

fn postprocess_chain() -> Outcome {
    let original = (2048, 2048);
    let (centre, r0) = ((1100.0, 900.0), 300.0);
    let gt = BinaryMask::disc(original.0, original.1, centre, r0);
    let model_side = 224;
    let small = resize_nearest(&gt, model_side, model_side);
    let map = Tensor::new(vec![model_side, model_side], small.to_f64()).unwrap();
    let cfg = DgPostprocess::default();

    let full = to_original(&map, original).unwrap();
    ensure(full.shape() == [2048, 2048], || format!("original-size map {:?}", full.shape()))?;
    let (top, left) = (window_start(centre.0, DG_CROP, 2048), window_start(centre.1, DG_CROP, 2048));
    ensure(top >= 0 && left >= 0 && top as usize + DG_CROP <= 2048 && left as usize + DG_CROP <= 2048, || {
        "crop window outside the image".into()
    })?;
    let pred = postprocess_dg(&map, original, Some(centre), &cfg).unwrap();
    let gt_pp = postprocess_mask_dg(&gt, original, Some(centre), &cfg).unwrap();
    ensure(pred.shape() == (DG_OUTPUT, DG_OUTPUT) && gt_pp.shape() == (DG_OUTPUT, DG_OUTPUT), || {
        "output is not 256x256".into()
    })?;
    let want = r0 * DG_OUTPUT as f64 / DG_CROP as f64;
    let (rp, rg) = (radius(&pred), radius(&gt_pp));
    ensure((rp - want).abs() <= RADIUS_TOL_PX, || format!("prediction radius {rp} vs {want}"))?;
    ensure((rg - want).abs() <= RADIUS_TOL_PX, || format!("ground-truth radius {rg} vs {want}"))?;
    Ok(format!("224 -> 2048 -> 800 -> 256, radius {rp:.2}/{rg:.2} px vs {want:.2}"))
}

fn smooth_ramp(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(500..4000);
    let lo = rng.gen_range(0.0..0.3);
    let hi = rng.gen_range(0.6..1.0);
    let logistic = rng.gen_bool(0.5);
    let mid = rng.gen_range(0.2..0.8) * n as f64;
    let tau = rng.gen_range(150.0..600.0);
    (0..n)
        .map(|e| {
            let t = if logistic {
                1.0 / (1.0 + (-(e as f64 - mid) / tau).exp())
            } else {
                e as f64 / (n - 1) as f64
            };
            lo + (hi - lo) * t
        })
        .collect()
}

fn grokking() -> Outcome {
    let window = discseg::train::GROKKING_WINDOW;
    let jump = discseg::train::GROKKING_JUMP;
    // Epochs are 1-based; curve index e−1 holds epoch e.
    let curve: Vec<f64> = (1..=3000).map(|e| if e < GROK_STEP_EPOCH { 0.1 } else { 0.95 }).collect();
    let a = detect_grokking(&curve, window, jump);
    let at = a.epoch.map(|i| i + 1);
    ensure(a.detected, || "step not detected".into())?;
    let off = at.unwrap() as isize - GROK_STEP_EPOCH as isize;
    ensure(off.unsigned_abs() <= window, || format!("fired at epoch {at:?}"))?;
    let mut rng = rng(81);
    let mut false_pos = 0;
    for _ in 0..GROK_RAMPS {
        if detect_grokking(&smooth_ramp(&mut rng), window, jump).detected {
            false_pos += 1;
        }
    }
    ensure(false_pos == 0, || format!("{false_pos} false positives"))?;
    Ok(format!("step at {GROK_STEP_EPOCH} flagged at epoch {}, 0/{GROK_RAMPS} ramps flagged", at.unwrap()))
}

fn determinism() -> Outcome {
    let discs = centred_discs(8, 32, 91).map_err(|e| e.to_string())?;
    let (train, val) = discs.split_at(6);
    let cfg = TrainConfig {
        seed: 92,
        epochs: Some(12),
        augmentation: AugmentationSpec::new(Regime::Spatial, 93),
        ..Default::default()
    };
    let run_once = || -> Result<(Vec<u8>, Vec<u8>, String), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut model = SegModel::toy(94, 95).map_err(|e| e.to_string())?;
        fit(&mut model, train, val, &cfg, Some(dir.path())).map_err(|e| e.to_string())?;
        let curve = std::fs::read(dir.path().join("curve.csv")).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(dir.path().join("best_head.dsw")).map_err(|e| e.to_string())?;
        let table = discseg::train::evaluate_samples(&model, val, None, Default::default())
            .and_then(|t| t.to_json())
            .map_err(|e| e.to_string())?;
        Ok((curve, ckpt, table))
    };
    let a = run_once()?;
    let b = run_once()?;
    ensure(a.0 == b.0, || "curves differ".into())?;
    ensure(a.1 == b.1, || "checkpoints differ".into())?;
    ensure(a.2 == b.2, || "metric reports differ".into())?;
    Ok(format!(
        "curve {} B, checkpoint {} B, report {} B identical",
        a.0.len(),
        a.1.len(),
        a.2.len()
    ))
}

fn augmentation_contracts() -> Outcome {
    let dom = SyntheticDomain::cool("aug");
    let sample = render("aug/0", &dom, 48, (22.0, 27.0), 11.0, 101).unwrap();
    let none = augment(&sample, &AugmentationSpec::new(Regime::None, 5));
    ensure(none == sample, || "regime none changed the sample".into())?;
    let mut cases = 0;
    for regime in [Regime::None, Regime::Spatial, Regime::Dst] {
        for seed in 0..20u64 {
            let spec = AugmentationSpec::new(regime, seed);
            let a = augment(&sample, &spec);
            let b = augment(&sample, &spec);
            ensure(a == b, || format!("{regime:?} seed {seed} not reproducible"))?;
            ensure(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
                format!("{regime:?} seed {seed} image bits differ")
            })?;
            ensure(a.mask.to_f64().iter().all(|&v| v == 0.0 || v == 1.0), || "mask not binary".into())?;
            ensure(a.image.shape() == sample.image.shape() && a.mask.shape() == sample.mask.shape(), || {
                format!("{regime:?} seed {seed} changed the size")
            })?;
            ensure(a.image.data().iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)), || {
                "pixel out of range".into()
            })?;
            if regime == Regime::Dst {
                // Photometric ops alone never move the mask.
                let ops: Vec<_> = plan(&spec, &sample.id).into_iter().filter(|o| !o.is_geometric()).collect();
                ensure(apply_ops(&sample, &ops).mask == sample.mask, || "photometric op moved the mask".into())?;
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} regime/seed cases, identity, binarity, reproducibility, fixed size"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", grad_check),
        ("metric oracle equivalence", metric_oracle),
        ("dice loss / score duality", duality),
        ("analytic loss values", closed_forms),
        ("end-to-end toy overfit", toy_overfit),
        ("protocol arithmetic", protocol_arithmetic),
        ("post-processing chain", postprocess_chain),
        ("grokking detector", grokking),
        ("determinism", determinism),
        ("augmentation contracts", augmentation_contracts),
    ];
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {why}", i + 1);
            }
        }
    }
    std::panic::set_hook(quiet);
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

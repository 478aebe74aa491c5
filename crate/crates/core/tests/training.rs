use discseg::container::WeightContainer;
use discseg::data::{AugmentationSpec, Regime, Split};
use discseg::model::SegModel;
use discseg::objectives::{LossConfig, LossMode};
use discseg::synthetic::{centred_discs, corpus, write_corpus, SyntheticDomain};
use discseg::train::{
    compute_epochs, detect_grokking, encode_all, fit, fit_manifest, mean_dice, RunConfig, TrainConfig, TrainRun,
};
use proptest::prelude::*;

proptest! {
    #[test]
    fn epochs_never_grow_with_more_data(a in 1usize..100_000, b in 1usize..100_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(compute_epochs(lo).unwrap() >= compute_epochs(hi).unwrap());
    }

    #[test]
    fn step_curves_are_flagged_near_the_step(at in 60usize..2000, tail in 60usize..500, low in 0.0f64..0.3) {
        let curve: Vec<f64> = (0..at + tail).map(|i| if i < at { low } else { 0.95 }).collect();
        let g = detect_grokking(&curve, 50, 0.4);
        prop_assert!(g.detected);
        prop_assert!(g.epoch.unwrap().abs_diff(at) <= 50);
    }

    #[test]
    fn rising_from_a_high_start_is_not_grokking(start in 0.5f64..0.9, n in 60usize..500) {
        let curve: Vec<f64> = (0..n).map(|i| (start + i as f64 / n as f64).min(1.0)).collect();
        prop_assert!(!detect_grokking(&curve, 50, 0.4).detected);
    }
}

#[test]
fn empty_training_set_has_no_epoch_count() {
    assert!(compute_epochs(0).is_err());
}

fn small_run(cfg: &TrainConfig, out: Option<&std::path::Path>) -> (SegModel, TrainRun, Vec<discseg::data::FundusSample>) {
    let discs = centred_discs(8, 32, 5).unwrap();
    let (train, val) = discs.split_at(6);
    let mut model = SegModel::toy(1, 2).unwrap();
    let run = fit(&mut model, train, val, cfg, out).unwrap();
    (model, run, val.to_vec())
}

#[test]
fn best_checkpoint_is_the_first_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: Some(15),
        seed: 4,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let (model, run, val) = small_run(&cfg, Some(dir.path()));
    let curve = run.val_curve();
    let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.best_val_dice, max);
    assert_eq!(run.best_epoch, curve.iter().position(|&d| d == max).unwrap() + 1);
    assert_eq!(run.records.len(), 15);
    assert!(!run.stopped_early);

    assert!(run.records[..run.best_epoch - 1].iter().all(|r| r.val_dice < max));

    let c = WeightContainer::load(dir.path().join("best_head.dsw")).unwrap();
    let reloaded = SegModel::from_checkpoint(&c, model.encoder.clone()).unwrap();
    assert_eq!(reloaded.head, model.head);
    let enc = encode_all(&reloaded, &val).unwrap();
    assert_eq!(mean_dice(&reloaded, &enc).unwrap(), run.best_val_dice);
    assert_eq!(run.encoder_checksum, format!("{:016x}", model.encoder.checksum()));

    let text = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(text.lines().count(), 16);
    let saved: TrainRun = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(saved.best_epoch, run.best_epoch);
}

#[test]
fn every_loss_mode_fits_the_toy_discs() {
    let discs = centred_discs(8, 32, 41).unwrap();
    for mode in [LossMode::Bce, LossMode::Dice, LossMode::DiceBce, LossMode::Ce] {
        let cfg = TrainConfig {
            seed: 3,
            max_epochs: Some(400),
            early_stop_dice: Some(0.95),
            loss: LossConfig {
                mode,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut model = SegModel::toy(1, 2).unwrap();
        let run = fit(&mut model, &discs, &discs, &cfg, None).unwrap();
        assert!(run.best_val_dice >= 0.95, "{mode:?}: {} at epoch {}", run.best_val_dice, run.best_epoch);
        assert!(run.stopped_early);
    }
}

#[test]
fn augmented_training_is_seeded() {
    let cfg = TrainConfig {
        epochs: Some(4),
        seed: 8,
        augmentation: AugmentationSpec::new(Regime::Dst, 9),
        ..Default::default()
    };
    let (_, a, _) = small_run(&cfg, None);
    let (_, b, _) = small_run(&cfg, None);
    assert_eq!(a.records, b.records);
    let other = TrainConfig {
        augmentation: AugmentationSpec::new(Regime::Dst, 10),
        ..cfg
    };
    let (_, c, _) = small_run(&other, None);
    assert_ne!(a.records, c.records);
}

#[test]
fn manifest_training_splits_when_no_validation_exists() {
    let dir = tempfile::tempdir().unwrap();
    let samples = corpus(&[SyntheticDomain::warm("w")], 10, 0, 32, 1).unwrap();
    let m = write_corpus(dir.path(), &samples).unwrap();
    assert_eq!(m.count(Split::Val), 0);
    let cfg = TrainConfig {
        epochs: Some(2),
        ..Default::default()
    };
    let mut model = SegModel::toy(1, 2).unwrap();
    let run = fit_manifest(&mut model, &m, &cfg, None).unwrap();
    assert_eq!(run.records.len(), 2);
}

#[test]
fn run_config_reads_partial_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    std::fs::write(&p, r#"{"train": {"learning_rate": 0.01, "loss": {"mode": "dice"}, "augmentation": {"regime": "spatial"}}}"#)
        .unwrap();
    let c = RunConfig::load(&p).unwrap();
    assert_eq!(c.train.learning_rate, 0.01);
    assert_eq!(c.train.loss.mode, LossMode::Dice);
    assert_eq!(c.train.augmentation.regime, Regime::Spatial);
    assert_eq!(c.train.batch_size, 4);
    std::fs::write(&p, r#"{"train": {"learning_rate": "fast"}}"#).unwrap();
    assert!(RunConfig::load(&p).is_err());
}

#[test]
fn invalid_settings_are_rejected() {
    let discs = centred_discs(2, 32, 1).unwrap();
    let mut model = SegModel::toy(1, 2).unwrap();
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..Default::default()
    };
    assert!(fit(&mut model, &discs, &discs, &bad, None).is_err());
    let zero_batch = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(fit(&mut model, &discs, &discs, &zero_batch, None).is_err());
    assert!(fit(&mut model, &[], &discs, &TrainConfig::default(), None).is_err());
}

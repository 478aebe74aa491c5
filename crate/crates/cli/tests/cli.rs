use std::path::Path;
use std::process::{Command, Output};

fn discseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = discseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, domains: usize) -> std::path::PathBuf {
    ok(&["synth", "--out", p(dir), "--domains", &domains.to_string(), "--train", "6", "--test", "2", "--size", "32"]);
    dir.join("manifest.json")
}

#[test]
fn train_then_eval_with_and_without_postprocessing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 1);
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"train": {"epochs": 3, "learning_rate": 0.003}}"#).unwrap();
    let out = dir.path().join("run");
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&["train", "--manifest", p(&manifest), "--config", p(&config), "--out", p(&out)]))
            .unwrap();
    assert_eq!(summary["epochs_run"], 3);
    for f in ["best_head.dsw", "curve.csv", "run.json", "config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,train_loss,val_dice\n"));

    let ckpt = out.join("best_head.dsw");
    for (toggle, report) in [("off", "plain.json"), ("on", "dg.json")] {
        let report = dir.path().join(report);
        ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&manifest),
            "--postprocess-dg",
            toggle,
            "--report",
            p(&report),
        ]);
        let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(table["rows"].as_array().unwrap().len(), 2);
        let d = table["mean"]["dice"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&d));
    }

    // A different encoder seed is refused.
    let other = dir.path().join("other.json");
    std::fs::write(&other, r#"{"model": {"encoder_seed": 99}}"#).unwrap();
    let r = dir.path().join("x.json");
    let bad = discseg(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--config",
        p(&other),
        "--report",
        p(&r),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("checksum"));
}

#[test]
fn metrics_scores_matching_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let gt = dir.path().join("masks");
    let report = dir.path().join("scores.csv");
    let stdout = ok(&["metrics", "--pred-dir", p(&gt), "--gt-dir", p(&gt), "--report", p(&report)]);
    let mean: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(mean["dice"], 1.0);
    assert_eq!(mean["hd95"], 0.0);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("id,dice,hd95_px,asd_px,point_set,asd_mode\n"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let r = discseg(&["metrics", "--pred-dir", p(&empty), "--gt-dir", p(&gt), "--report", p(&report)]);
    assert!(!r.status.success());
}

#[test]
fn split_is_seeded_and_keeps_paths_valid() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 2);
    let a = ok(&["split", "--manifest", p(&manifest), "--seed", "4"]);
    assert_eq!(a, ok(&["split", "--manifest", p(&manifest), "--seed", "4"]));
    let m: serde_json::Value = serde_json::from_str(&a).unwrap();
    let val = m["entries"].as_array().unwrap().iter().filter(|e| e["split"] == "val").count();
    assert_eq!(val, 4);
    assert_eq!(m["split_seed"], 4);

    let moved = dir.path().join("elsewhere.json");
    ok(&["split", "--manifest", p(&manifest), "--seed", "4", "--out", p(&moved)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&moved).unwrap()).unwrap();
    for e in m["entries"].as_array().unwrap() {
        assert!(Path::new(e["image"].as_str().unwrap()).is_file());
    }
}

#[test]
fn preview_writes_augmented_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aug");
    ok(&["preview-aug", "--regime", "dst", "--seed", "3", "--out", p(&out), "--count", "2"]);
    for i in 0..2 {
        for kind in ["original", "image", "mask"] {
            assert!(out.join(format!("preview_{i}_{kind}.png")).is_file());
        }
    }
    let ops: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ops.json")).unwrap()).unwrap();
    assert_eq!(ops.as_object().unwrap().len(), 2);
    assert!(!discseg(&["preview-aug", "--regime", "sideways", "--seed", "3", "--out", p(&out)]).status.success());
}

#[test]
fn experiment_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 2);
    let plan = dir.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"{"plan": {"design": "domain-generalization"}, "manifest": "data/manifest.json",
            "train": {"epochs": 1}, "postprocess": {"crop": 24, "output": 32}}"#,
    )
    .unwrap();
    let out = dir.path().join("exp");
    let stdout = ok(&["experiment", "--plan", p(&plan), "--out", p(&out)]);
    assert_eq!(stdout.lines().count(), 3);
    assert!(out.join("report.json").is_file());
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap(), stdout);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let r = discseg(&["train", "--manifest", p(&missing), "--out", p(dir.path())]);
    assert!(!r.status.success());
    assert!(!discseg(&["eval", "--checkpoint", p(&missing)]).status.success());
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use discseg::container::WeightContainer;
use discseg::data::{
    apply_ops, load_mask, plan, save_image, save_mask, split_train_val, AugmentationSpec, DatasetManifest,
    DgPostprocess, Regime, Split,
};
use discseg::metrics::{evaluate_with, AsdMode, ImageRow, MetricOptions, MetricTable, PointSet};
use discseg::model::SegModel;
use discseg::synthetic::{corpus, random_sample, write_corpus, SyntheticDomain};
use discseg::train::{evaluate_samples, fit_manifest, run_experiment, ExperimentConfig, ModelConfig, RunConfig};

/// Optic-disc segmentation with a frozen ViT encoder and a trainable mask head.
#[derive(Parser)]
#[command(name = "discseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    None,
    Spatial,
    Dst,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::None => Regime::None,
            RegimeArg::Spatial => Regime::Spatial,
            RegimeArg::Dst => Regime::Dst,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::Args)]
struct MetricArgs {
    /// Pixels used by the distance metrics.
    #[arg(long, default_value = "boundary", value_parser = ["boundary", "full-mask"])]
    point_set: String,
    /// Average surface distance reduction.
    #[arg(long, default_value = "directed", value_parser = ["directed", "symmetric"])]
    asd_mode: String,
}

impl MetricArgs {
    fn options(&self) -> Result<MetricOptions> {
        Ok(MetricOptions {
            point_set: self.point_set.parse::<PointSet>()?,
            asd_mode: self.asd_mode.parse::<AsdMode>()?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a mask head and write best_head.dsw, curve.csv and run.json.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Run configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained head on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Crop around the disc and resize before scoring.
        #[arg(long, value_enum, default_value = "off")]
        postprocess_dg: Toggle,
        /// Output path; `.csv` writes per-image rows, anything else JSON.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run configuration used for training. Looked up next to the
        /// checkpoint when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Score predicted mask PNGs against ground-truth PNGs of the same name.
    Metrics {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Output path; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Split each domain's training pool 4:1 into train and validation.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Where to write the split manifest; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write augmented image and mask PNGs for inspection.
    PreviewAug {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Source images; synthetic samples are used when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Run an internal-verification, generalization or adaptation plan.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic multi-domain corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        domains: usize,
        #[arg(long, default_value_t = 10)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { manifest, config, out } => train(&manifest, config.as_deref(), &out),
        Command::Eval {
            checkpoint,
            manifest,
            postprocess_dg,
            report,
            split,
            config,
            metrics,
        } => {
            let dg = matches!(postprocess_dg, Toggle::On).then(DgPostprocess::default);
            eval(&checkpoint, &manifest, dg, &report, split.into(), config.as_deref(), metrics.options()?)
        }
        Command::Metrics {
            pred_dir,
            gt_dir,
            report,
            metrics,
        } => score_dirs(&pred_dir, &gt_dir, &report, metrics.options()?),
        Command::Split { manifest, seed, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let mut s = split_train_val(&m, seed)?;
            s.split_seed = Some(seed);
            match out {
                Some(p) => {
                    if dir_of(&p) != dir_of(&manifest) {
                        for e in &mut s.entries {
                            e.image = absolute(&m.resolve(&e.image));
                            e.mask = absolute(&m.resolve(&e.mask));
                        }
                    }
                    s.save(&p)?
                }
                None => println!("{}", serde_json::to_string_pretty(&s)?),
            }
            eprintln!("train {}, val {}, test {}", s.count(Split::Train), s.count(Split::Val), s.count(Split::Test));
            Ok(())
        }
        Command::PreviewAug {
            regime,
            seed,
            out,
            manifest,
            count,
        } => preview(regime.into(), seed, &out, manifest.as_deref(), count),
        Command::Experiment { plan, out } => {
            let cfg = ExperimentConfig::load(&plan)?;
            let manifest = DatasetManifest::load(&cfg.manifest)
                .with_context(|| format!("loading manifest {}", cfg.manifest.display()))?;
            let report = run_experiment(&cfg, &manifest, Some(&out))?;
            report.write_csv(std::io::stdout())?;
            Ok(())
        }
        Command::Synth {
            out,
            domains,
            train,
            test,
            size,
            seed,
        } => {
            let doms: Vec<_> = (0..domains).map(SyntheticDomain::preset).collect();
            let m = write_corpus(&out, &corpus(&doms, train, test, size, seed)?)?;
            m.save(out.join("manifest.json"))?;
            eprintln!("wrote {} entries to {}", m.entries.len(), out.join("manifest.json").display());
            Ok(())
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn dir_of(file: &Path) -> PathBuf {
    match file.parent() {
        Some(d) if !d.as_os_str().is_empty() => absolute(d),
        _ => absolute(Path::new(".")),
    }
}

fn train(manifest: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let m = DatasetManifest::load(manifest)?;
    let mut model = cfg.model.build(cfg.train.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let run = fit_manifest(&mut model, &m, &cfg.train, Some(out))?;
    println!(
        "{}",
        serde_json::json!({
            "epochs_run": run.records.len(),
            "planned_epochs": run.planned_epochs,
            "best_epoch": run.best_epoch,
            "best_val_dice": run.best_val_dice,
            "stopped_early": run.stopped_early,
            "grokking_epoch": run.grokking.epoch,
        })
    );
    Ok(())
}

/// Model settings for a checkpoint: an explicit config, else the one `train`
/// left beside it, else a seeded random encoder of the recorded shape.
fn model_config(checkpoint: &Path, c: &WeightContainer, config: Option<&Path>) -> Result<ModelConfig> {
    let beside = checkpoint.parent().map(|d| d.join("config.json"));
    let path = config.map(Path::to_path_buf).or(beside.filter(|p| p.is_file()));
    Ok(match path {
        Some(p) => RunConfig::load(&p)?.model,
        None => ModelConfig {
            encoder: SegModel::checkpoint_encoder_config(c)?,
            ..Default::default()
        },
    })
}

fn eval(
    checkpoint: &Path,
    manifest: &Path,
    dg: Option<DgPostprocess>,
    report: &Path,
    split: Split,
    config: Option<&Path>,
    opts: MetricOptions,
) -> Result<()> {
    let c = WeightContainer::load(checkpoint)?;
    let encoder = model_config(checkpoint, &c, config)?.build_encoder()?;
    let model = SegModel::from_checkpoint(&c, encoder)?;
    let samples = DatasetManifest::load(manifest)?.load_samples(split)?;
    if samples.is_empty() {
        bail!("manifest has no {split:?} entries");
    }
    let table = evaluate_samples(&model, &samples, dg.as_ref(), opts)?;
    write_table(&table, report, false)?;
    println!("{}", serde_json::to_string(&table.mean)?);
    Ok(())
}

fn write_table(table: &MetricTable, path: &Path, csv_default: bool) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let csv = if csv_default { ext != "json" } else { ext == "csv" };
    if csv {
        table.save_csv(path)?;
    } else {
        std::fs::write(path, table.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn score_dirs(pred_dir: &Path, gt_dir: &Path, report: &Path, opts: MetricOptions) -> Result<()> {
    let names = png_names(gt_dir)?;
    if names.is_empty() {
        bail!("no PNG masks in {}", gt_dir.display());
    }
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let pred_path = pred_dir.join(&name);
        if !pred_path.is_file() {
            bail!("no prediction for {name} in {}", pred_dir.display());
        }
        let pred = load_mask(&pred_path)?;
        let gt = load_mask(&gt_dir.join(&name))?;
        let report = evaluate_with(&pred, &gt, opts).with_context(|| format!("scoring {name}"))?;
        let id = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s).to_string();
        rows.push(ImageRow { id, report });
    }
    let table = MetricTable::new(rows);
    write_table(&table, report, true)?;
    println!("{}", serde_json::to_string(&table.mean)?);
    Ok(())
}

fn preview(regime: Regime, seed: u64, out: &Path, manifest: Option<&Path>, count: usize) -> Result<()> {
    let samples = match manifest {
        Some(p) => {
            let m = DatasetManifest::load(p)?;
            let mut v = m.load_samples(Split::Train)?;
            v.truncate(count);
            v
        }
        None => (0..count)
            .map(|i| random_sample(&format!("preview/{i}"), &SyntheticDomain::preset(i), 128, seed))
            .collect::<discseg::Result<_>>()?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let spec = AugmentationSpec::new(regime, seed);
    let mut log = serde_json::Map::new();
    for s in &samples {
        let ops = plan(&spec, &s.id);
        let aug = apply_ops(s, &ops);
        let stem = s.id.replace('/', "_");
        save_image(&s.image, &out.join(format!("{stem}_original.png")))?;
        save_image(&aug.image, &out.join(format!("{stem}_image.png")))?;
        save_mask(&aug.mask, &out.join(format!("{stem}_mask.png")))?;
        log.insert(s.id.clone(), serde_json::to_value(&ops)?);
    }
    std::fs::write(out.join("ops.json"), serde_json::to_string_pretty(&log)?)?;
    eprintln!("wrote {} previews to {}", samples.len(), out.display());
    Ok(())
}

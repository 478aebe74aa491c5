//! Training loop, optimizer, checkpointing and the experiment designs.
//!
//! Learning rate is constant: no decay, warmup or cyclic schedule exists.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::WeightContainer;
use crate::data::postprocess::postprocess_mask_dg;
use crate::data::{
    augment, postprocess_dg, preprocess, split_train_val, AugmentationSpec, DatasetManifest, DgPostprocess,
    FundusSample, OdCentreSource, Split,
};
use crate::decoder::{HeadConfig, HeadWeights, FOREGROUND};
use crate::encoder::{load_weights, EncoderConfig, FrozenEncoder};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{confusion, dice_score, evaluate_with, ImageRow, MetricOptions, MetricTable};
use crate::model::SegModel;
use crate::objectives::{GroundTruth, LossConfig};
use crate::tensor::{derive_seed, Parameter, Tensor};

/// Total image presentations the epoch count is derived from.
pub const IMAGE_BUDGET: usize = 3_200_000;

/// `⌊3,200,000 / num_train⌋`.
pub fn compute_epochs(num_train: usize) -> Result<usize> {
    if num_train == 0 {
        return Err(Error::Argument("cannot derive epochs for an empty training set".into()));
    }
    Ok(IMAGE_BUDGET / num_train)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient. Frozen parameters are skipped. If any trainable
/// parameter lacks a gradient nothing is updated.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let params: Vec<&mut Parameter> = params.into_iter().filter(|p| !p.is_frozen()).collect();
    if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in params {
        let grad = p.grad().expect("checked above").to_vec();
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let values = p.values_mut()?;
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Explicit epoch count; derived from the training-set size when absent.
    pub epochs: Option<usize>,
    /// Upper bound applied after the epoch count is chosen.
    pub max_epochs: Option<usize>,
    pub adam: AdamConfig,
    /// Seeds head initialization and batch order.
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    pub loss: LossConfig,
    /// Stop once validation Dice reaches this value.
    pub early_stop_dice: Option<f64>,
    pub grokking_window: usize,
    pub grokking_jump: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: None,
            max_epochs: None,
            adam: AdamConfig::default(),
            seed: 0,
            augmentation: AugmentationSpec::default(),
            loss: LossConfig::default(),
            early_stop_dice: None,
            grokking_window: GROKKING_WINDOW,
            grokking_jump: GROKKING_JUMP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn planned_epochs(&self, num_train: usize) -> Result<usize> {
        let e = match self.epochs {
            Some(e) => e,
            None => compute_epochs(num_train)?,
        };
        Ok(self.max_epochs.map_or(e, |cap| e.min(cap)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

pub const GROKKING_WINDOW: usize = 50;
pub const GROKKING_JUMP: f64 = 0.4;
/// Previous-window mean must sit below this for a jump to count.
pub const GROKKING_PLATEAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GrokkingAnnotation {
    pub detected: bool,
    /// Index into the curve of the first point after the low plateau.
    pub epoch: Option<usize>,
}

/// Flags the first index `e` where `max(curve[e..e+window]) −
/// mean(curve[e−window..e]) ≥ jump` while that previous mean is below 0.5.
/// The trailing window may be shorter at the end of the curve. Curves no
/// longer than `window` are never flagged.
pub fn detect_grokking(curve: &[f64], window: usize, jump: f64) -> GrokkingAnnotation {
    if window == 0 || curve.len() <= window {
        return GrokkingAnnotation::default();
    }
    for e in window..curve.len() {
        let prev = &curve[e - window..e];
        let mean = prev.iter().sum::<f64>() / window as f64;
        if mean >= GROKKING_PLATEAU {
            continue;
        }
        let next = &curve[e..(e + window).min(curve.len())];
        let peak = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if peak - mean >= jump {
            return GrokkingAnnotation {
                detected: true,
                epoch: Some(e),
            };
        }
    }
    GrokkingAnnotation::default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    pub planned_epochs: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub checkpoint: Option<PathBuf>,
    pub grokking: GrokkingAnnotation,
    pub stopped_early: bool,
    pub encoder_checksum: String,
    /// Head weights at `best_epoch`, with model metadata.
    #[serde(skip)]
    pub best_checkpoint: Option<WeightContainer>,
}

impl TrainRun {
    pub fn val_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_dice).collect()
    }

    /// `epoch,train_loss,val_dice` rows.
    pub fn write_curve_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "val_dice"])?;
        for r in &self.records {
            out.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_dice.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_curve_csv(f)
    }
}

/// A preprocessed image with cached encoder features.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Tensor,
    pub mask: BinaryMask,
}

pub fn encode_sample(model: &SegModel, sample: &FundusSample) -> Result<Encoded> {
    let p = preprocess(sample, model.image_size())?;
    Ok(Encoded {
        features: model.features(&p.image)?,
        mask: p.mask,
    })
}

pub fn encode_all(model: &SegModel, samples: &[FundusSample]) -> Result<Vec<Encoded>> {
    samples.iter().map(|s| encode_sample(model, s)).collect()
}

/// Mean Dice of the current head over encoded samples.
pub fn mean_dice(model: &SegModel, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for e in data {
        let (_, mask) = model.predict_features(&e.features)?;
        total += dice_score(&confusion(&mask, &e.mask)?);
    }
    Ok(total / data.len() as f64)
}

/// One optimizer step on a batch; returns the mean per-image loss.
pub fn train_step(
    model: &mut SegModel,
    batch: &[&Encoded],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    model.head.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for e in batch {
        let lg = model.loss_and_grads(&e.features, &GroundTruth::new(e.mask.clone()), &cfg.loss)?;
        lg.grads.accumulate_into(model.head.parameters_mut(), scale)?;
        loss += lg.loss * scale;
    }
    adam_step(model.head.parameters_mut(), state, cfg.learning_rate, &cfg.adam)?;
    Ok(loss)
}

/// Losses of `steps` consecutive updates on the same batch.
pub fn fixed_batch_losses(model: &mut SegModel, batch: &[&Encoded], cfg: &TrainConfig, steps: usize) -> Result<Vec<f64>> {
    let mut state = AdamState::new();
    (0..steps).map(|_| train_step(model, batch, &mut state, cfg)).collect()
}

/// Trains the head. The best-validation head is kept in the returned run,
/// written to `out/best_head.dsw` when `out` is given, and loaded back into
/// `model` before returning.
pub fn fit(
    model: &mut SegModel,
    train: &[FundusSample],
    val: &[FundusSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Argument("validation set is empty".into()));
    }
    let checksum_before = model.encoder.checksum();
    let epochs = cfg.planned_epochs(train.len())?;
    let val_enc = encode_all(model, val)?;
    let augmenting = cfg.augmentation.regime != crate::data::Regime::None;
    let static_train = if augmenting { None } else { Some(encode_all(model, train)?) };
    let checkpoint_path = out.map(|d| d.join("best_head.dsw"));
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut state = AdamState::new();
    let mut records = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64, WeightContainer)> = None;
    let mut stopped_early = false;
    for epoch in 1..=epochs {
        let label = format!("epoch{epoch}");
        let fresh;
        let train_enc: &[Encoded] = match &static_train {
            Some(v) => v,
            None => {
                let spec = AugmentationSpec {
                    seed: derive_seed(cfg.augmentation.seed, &label),
                    ..cfg.augmentation
                };
                let aug: Vec<FundusSample> = train.iter().map(|s| augment(s, &spec)).collect();
                fresh = encode_all(model, &aug)?;
                &fresh
            }
        };
        let mut order: Vec<usize> = (0..train_enc.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &label)));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &train_enc[i]).collect();
            let l = train_step(model, &batch, &mut state, cfg)?;
            if !l.is_finite() {
                return Err(Error::Divergence { epoch, loss: l });
            }
            loss_sum += l * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_enc.len() as f64;
        let val_dice = mean_dice(model, &val_enc)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_dice,
        });
        if best.as_ref().is_none_or(|(_, d, _)| val_dice > *d) {
            let c = model.checkpoint()?;
            if let Some(p) = &checkpoint_path {
                c.save(p, crate::container::DType::F64)?;
            }
            best = Some((epoch, val_dice, c));
        }
        if cfg.early_stop_dice.is_some_and(|t| val_dice >= t) {
            stopped_early = epoch < epochs;
            break;
        }
    }

    if model.encoder.checksum() != checksum_before {
        return Err(Error::Contract("encoder weights changed during training".into()));
    }
    let grokking = detect_grokking(
        &records.iter().map(|r| r.val_dice).collect::<Vec<_>>(),
        cfg.grokking_window,
        cfg.grokking_jump,
    );
    let (best_epoch, best_val_dice, best_c) = match best {
        Some(b) => b,
        None => (0, f64::NAN, model.checkpoint()?),
    };
    model.head = HeadWeights::from_container(&best_c, &model.head_cfg)?;
    let run = TrainRun {
        records,
        planned_epochs: epochs,
        best_epoch,
        best_val_dice,
        checkpoint: if best_epoch > 0 { checkpoint_path } else { None },
        grokking,
        stopped_early,
        encoder_checksum: format!("{checksum_before:016x}"),
        best_checkpoint: Some(best_c),
    };
    if let Some(d) = out {
        run.save_curve_csv(d.join("curve.csv"))?;
        let p = d.join("run.json");
        std::fs::write(&p, serde_json::to_string_pretty(&run)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(run)
}

/// Loads train and validation splits from a manifest (splitting the
/// training pool 4:1 when no validation entries exist) and trains.
pub fn fit_manifest(
    model: &mut SegModel,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainRun> {
    let m = if manifest.count(Split::Val) == 0 {
        split_train_val(manifest, manifest.split_seed.unwrap_or(cfg.seed))?
    } else {
        manifest.clone()
    };
    let train = m.load_samples(Split::Train)?;
    let val = m.load_samples(Split::Val)?;
    fit(model, &train, &val, cfg, out)
}

/// Model construction settings shared by the CLI and experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Pretrained encoder weights; a seeded random encoder when absent.
    pub encoder_weights: Option<PathBuf>,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            head: HeadConfig::toy(),
            encoder_weights: None,
            encoder_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn build_encoder(&self) -> Result<FrozenEncoder> {
        match &self.encoder_weights {
            Some(p) => Ok(FrozenEncoder {
                cfg: self.encoder.clone(),
                weights: load_weights(p, &self.encoder)?,
            }),
            None => FrozenEncoder::random(self.encoder.clone(), self.encoder_seed),
        }
    }

    pub fn build(&self, head_seed: u64) -> Result<SegModel> {
        SegModel::new(self.build_encoder()?, self.head.clone(), head_seed)
    }
}

/// Training run description read by the `train` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    InternalVerification,
    DomainGeneralization,
    DomainAdaptation,
}

/// Which domains train and which are tested. Empty lists mean every domain
/// in the manifest.
///
/// * Internal verification trains and tests on each source domain alone.
/// * Domain generalization holds out each target in turn and trains on the
///   pooled remaining sources.
/// * Domain adaptation trains on each source alone and tests on every target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub design: Design,
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
}

/// Everything an experiment needs beyond the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub plan: ExperimentPlan,
    pub manifest: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub head_seed: u64,
    #[serde(default)]
    pub postprocess: DgPostprocess,
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if c.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                c.manifest = dir.join(&c.manifest);
            }
        }
        Ok(c)
    }
}

/// One trained-on → tested-on result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub train_domains: Vec<String>,
    pub test_domain: String,
    pub postprocessed: bool,
    pub metrics: MetricTable,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: Design,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    /// Summary columns `train_domains,test_domain,images,dice,hd95_px,asd_px,
    /// undefined_distances,postprocessed`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "train_domains",
            "test_domain",
            "images",
            "dice",
            "hd95_px",
            "asd_px",
            "undefined_distances",
            "postprocessed",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics.mean;
            out.write_record([
                r.train_domains.join("+"),
                r.test_domain.clone(),
                m.images.to_string(),
                m.dice.to_string(),
                opt(m.hd95),
                opt(m.asd),
                m.undefined_distances.to_string(),
                r.postprocessed.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Mean Dice of the row trained on `train` and tested on `test`.
    pub fn dice(&self, train: &[&str], test: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.test_domain == test && r.train_domains.iter().map(String::as_str).eq(train.iter().copied()))
            .map(|r| r.metrics.mean.dice)
    }
}

/// Evaluates a trained model on samples. With `dg` set, prediction and
/// ground truth both go through [`postprocess_dg`] at original resolution
/// before metrics; otherwise metrics are computed at model resolution.
pub fn evaluate_samples(
    model: &SegModel,
    samples: &[FundusSample],
    dg: Option<&DgPostprocess>,
    opts: MetricOptions,
) -> Result<MetricTable> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let p = preprocess(s, model.image_size())?;
        let (pm, pred) = model.predict(&p.image)?;
        let report = match dg {
            None => evaluate_with(&pred, &p.mask, opts)?,
            Some(cfg) => {
                let (h, w) = pm.size();
                let fg = Tensor::new(vec![h, w], pm.plane(FOREGROUND).to_vec())?;
                let centre = match cfg.centre {
                    OdCentreSource::GroundTruth => s.od_centre,
                    OdCentreSource::Predicted => {
                        let full = crate::data::postprocess::to_original(&fg, s.original_size)?;
                        let (oh, ow) = s.original_size;
                        BinaryMask::new(oh, ow, full.data().iter().map(|&v| v > 0.5).collect())?
                            .centroid()
                            .or(s.od_centre)
                    }
                };
                let pred_pp = postprocess_dg(&fg, s.original_size, centre, cfg)?;
                let gt_pp = postprocess_mask_dg(&s.mask, s.original_size, centre, cfg)?;
                evaluate_with(&pred_pp, &gt_pp, opts)?
            }
        };
        rows.push(ImageRow {
            id: s.id.clone(),
            report,
        });
    }
    Ok(MetricTable::new(rows))
}

fn check_domains(manifest: &DatasetManifest, names: &[String]) -> Result<()> {
    let known = manifest.domains();
    for n in names {
        if !known.contains(n) {
            return Err(Error::Config(format!("plan names domain `{n}` absent from the manifest")));
        }
    }
    Ok(())
}

/// Runs the plan's trainings and evaluations. Trained heads are reused
/// whenever two rows share the same training domains.
pub fn run_experiment(cfg: &ExperimentConfig, manifest: &DatasetManifest, out: Option<&Path>) -> Result<ExperimentReport> {
    let plan = &cfg.plan;
    let all = manifest.domains();
    let or_all = |v: &Vec<String>| if v.is_empty() { all.clone() } else { v.clone() };
    let sources = or_all(&plan.sources);
    let targets = or_all(&plan.targets);
    check_domains(manifest, &sources)?;
    check_domains(manifest, &targets)?;

    let jobs: Vec<(Vec<String>, Vec<String>)> = match plan.design {
        Design::InternalVerification => sources.iter().map(|d| (vec![d.clone()], vec![d.clone()])).collect(),
        Design::DomainAdaptation => sources.iter().map(|d| (vec![d.clone()], targets.clone())).collect(),
        Design::DomainGeneralization => {
            let mut jobs = Vec::new();
            for t in &targets {
                let src: Vec<String> = sources.iter().filter(|s| *s != t).cloned().collect();
                if src.is_empty() {
                    return Err(Error::Config(format!("no source domains left when holding out `{t}`")));
                }
                jobs.push((src, vec![t.clone()]));
            }
            jobs
        }
    };
    let dg = (plan.design == Design::DomainGeneralization).then_some(&cfg.postprocess);

    let encoder = cfg.model.build_encoder()?;
    let mut trained: BTreeMap<Vec<String>, (SegModel, TrainRun)> = BTreeMap::new();
    let mut rows = Vec::new();
    for (src, tgts) in jobs {
        if !trained.contains_key(&src) {
            let sub = manifest.restrict(&src);
            if sub.count(Split::Train) == 0 {
                return Err(Error::Config(format!("no training entries for {}", src.join("+"))));
            }
            let mut model = SegModel::new(encoder.clone(), cfg.model.head.clone(), cfg.head_seed)?;
            let dir = out.map(|d| d.join(format!("train_{}", src.join("+"))));
            let run = fit_manifest(&mut model, &sub, &cfg.train, dir.as_deref())?;
            trained.insert(src.clone(), (model, run));
        }
        let (model, run) = &trained[&src];
        for t in tgts {
            let test = manifest.restrict(std::slice::from_ref(&t)).load_samples(Split::Test)?;
            if test.is_empty() {
                return Err(Error::Config(format!("domain `{t}` has no test entries")));
            }
            rows.push(ExperimentRow {
                train_domains: src.clone(),
                test_domain: t.clone(),
                postprocessed: dg.is_some(),
                metrics: evaluate_samples(model, &test, dg, cfg.metrics)?,
                best_epoch: run.best_epoch,
                best_val_dice: run.best_val_dice,
            });
        }
    }
    let report = ExperimentReport {
        design: plan.design,
        rows,
    };
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
        let p = d.join("summary.csv");
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        report.write_csv(f)?;
    }
    Ok(report)
}

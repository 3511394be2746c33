//! Three-stage training schedule, evaluation and checkpoint plumbing.
//!
//! Checkpoint layout under `trainer.checkpoint_dir`:
//!
//! ```text
//! train_log.jsonl        one record per step and per epoch, all stages
//! extractor/             best-validation parameters after extractor pretraining
//! classifier/            ... after classifier pretraining (both models)
//! joint/                 ... after joint fine-tuning
//! <stage>/last/          latest parameters plus optimizer state, for --resume
//! ```

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::sync_channel;

use cocktail_tensor::{checkpoint, DType, Element, Optimizer, ParamStore, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierVariant, PredictionMatrix};
use crate::config::RunConfig;
use crate::corpus::{key, Corpus, MixtureSample, Split};
use crate::dsp::BINS;
use crate::error::{Error, Result};
use crate::extractor::{Extractor, Variant};
use crate::objectives::{maxpool_cce, maxpool_cce_tape, mn_accuracy, pit_mse, pit_mse_tape};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";
const LAST_DIR: &str = "last";
const POOLING_TAG: &str = "channel-max";

// Stream tags for derived seeds.
const SEED_EXTRACTOR: u64 = 1;
const SEED_CLASSIFIER: u64 = 2;
const SEED_TRAIN: u64 = 3;
const SEED_EVAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainExtractor,
    PretrainClassifier,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PretrainExtractor, Stage::PretrainClassifier, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainExtractor => "pretrain_extractor",
            Stage::PretrainClassifier => "pretrain_classifier",
            Stage::Joint => "joint",
        }
    }

    /// Subdirectory of the checkpoint root holding this stage's output.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::PretrainExtractor => "extractor",
            Stage::PretrainClassifier => "classifier",
            Stage::Joint => "joint",
        }
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::PretrainExtractor => None,
            Stage::PretrainClassifier => Some(Stage::PretrainExtractor),
            Stage::Joint => Some(Stage::PretrainClassifier),
        }
    }

    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        cfg.trainer.checkpoint_dir.join(self.dir_name())
    }

    fn epochs(self, cfg: &RunConfig) -> usize {
        match self {
            Stage::PretrainExtractor => cfg.trainer.extractor_epochs,
            Stage::PretrainClassifier => cfg.trainer.classifier_epochs,
            Stage::Joint => cfg.trainer.joint_epochs,
        }
    }

    fn lr(self, cfg: &RunConfig) -> f64 {
        match self {
            Stage::Joint => cfg.trainer.lr_joint,
            _ => cfg.trainer.lr_pretrain,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_extractor" | "extractor" => Ok(Stage::PretrainExtractor),
            "pretrain_classifier" | "classifier" => Ok(Stage::PretrainClassifier),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Config(format!(
                "unknown stage {other:?} (expected pretrain_extractor, pretrain_classifier or joint)"
            ))),
        }
    }
}

/// Extractor and classifier trained together.
#[derive(Debug, Clone)]
pub struct Models<T: Element> {
    pub extractor: Extractor<T>,
    pub classifier: Classifier<T>,
}

impl<T: Element> Models<T> {
    /// Freshly initialised models seeded from `trainer.seed`.
    pub fn new(cfg: &RunConfig) -> Self {
        Models {
            extractor: Extractor::new(&cfg.extractor, key(cfg.trainer.seed, &[SEED_EXTRACTOR])),
            classifier: Classifier::new(&cfg.classifier, key(cfg.trainer.seed, &[SEED_CLASSIFIER])),
        }
    }

    pub fn stores(&self) -> [&ParamStore<T>; 2] {
        [&self.extractor.store, &self.classifier.store]
    }

    pub fn named_values(&self) -> Vec<(String, &Tensor<T>)> {
        self.stores().into_iter().flat_map(|s| s.named_values()).collect()
    }

    fn load_values(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        self.extractor.store.load_values(tensors)?;
        self.classifier.store.load_values(tensors)?;
        Ok(())
    }

    /// Loads a stage checkpoint written for `cfg`.
    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<(Self, CheckpointInfo)> {
        let (tensors, info) = load_checkpoint::<T>(cfg, dir)?;
        let mut models = Models::new(cfg);
        models.load_values(&tensors)?;
        Ok((models, info))
    }
}

/// Reads a checkpoint and checks it was written for `cfg`'s models and corpus.
pub fn load_checkpoint<T: Element>(cfg: &RunConfig, dir: &Path) -> Result<(Vec<(String, Tensor<T>)>, CheckpointInfo)> {
    let (manifest, tensors) = checkpoint::load::<T>(dir)?;
    let info: CheckpointInfo = serde_json::from_value(manifest.metadata.clone())
        .map_err(|e| Error::invalid(format!("{}: unreadable checkpoint metadata: {e}", dir.display())))?;
    let saved = info.config.n_sources();
    if saved != cfg.n_sources() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for {saved} sources, config asks for {}",
            dir.display(),
            cfg.n_sources()
        )));
    }
    let model_hash = cfg.model_hash();
    if manifest.config_hash != model_hash {
        return Err(Error::HashMismatch {
            what: "model config",
            expected: model_hash,
            found: manifest.config_hash,
        });
    }
    let corpus_hash = cfg.corpus_hash();
    if info.corpus_hash != corpus_hash {
        return Err(Error::HashMismatch {
            what: "corpus config",
            expected: corpus_hash,
            found: info.corpus_hash,
        });
    }
    Ok((tensors, info))
}

/// Metadata stored in every stage checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub config: RunConfig,
    pub config_hash: String,
    pub model_hash: String,
    pub corpus_hash: String,
    pub variant: Variant,
    pub classifier_variant: ClassifierVariant,
    pub validation: Option<EvalReport>,
    /// Progress of the stage, used by `--resume`.
    pub resume: ResumeState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub epochs_done: usize,
    pub best_loss: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
    pub stopped: bool,
}

fn checkpoint_info(cfg: &RunConfig, stage: Stage, epoch: usize, step: u64, validation: Option<EvalReport>, resume: ResumeState) -> CheckpointInfo {
    CheckpointInfo {
        stage,
        epoch,
        step,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        model_hash: cfg.model_hash(),
        corpus_hash: cfg.corpus_hash(),
        variant: cfg.extractor.variant,
        classifier_variant: cfg.classifier.variant,
        validation,
        resume,
    }
}

fn save_models<T: Element>(dir: &Path, models: &Models<T>, extra: Vec<(String, Tensor<T>)>, info: &CheckpointInfo) -> Result<()> {
    let mut tensors = models.named_values();
    tensors.extend(extra.iter().map(|(n, t)| (n.clone(), t)));
    let metadata = serde_json::to_value(info)?;
    checkpoint::save(dir, &tensors, &info.model_hash, info.step, metadata)?;
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub mse: Option<f64>,
    pub cce: Option<f64>,
    pub total: f64,
    /// Present on end-of-epoch records.
    pub val_metrics: Option<ValMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub loss: f64,
    pub mse: f64,
    pub cce: Option<f64>,
    pub accuracy: Vec<Accuracy>,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub m: usize,
    pub n: usize,
    pub percent: f64,
}

/// Evaluation summary laid out like the results table: one `M/N` column per
/// `M` for the configured `N`, plus mean reconstruction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub n_sources: usize,
    pub samples: usize,
    pub accuracy: Vec<Accuracy>,
    pub mean_mse: f64,
    pub mean_cce: f64,
    pub pooling: String,
    pub variant: Variant,
    pub classifier_variant: ClassifierVariant,
    pub config_hash: String,
    pub model_hash: String,
    pub corpus_hash: String,
}

impl EvalReport {
    pub fn percent(&self, m: usize, n: usize) -> Option<f64> {
        self.accuracy.iter().find(|a| a.m == m && a.n == n).map(|a| a.percent)
    }

    /// Plain-text table with one `M/N` column per accuracy and the MSE.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for a in &self.accuracy {
            head.push_str(&format!("{:>8}", format!("{}/{}", a.m, a.n)));
            row.push_str(&format!("{:>8.1}", a.percent));
        }
        head.push_str(&format!("{:>10}", "MSE"));
        row.push_str(&format!("{:>10.4}", self.mean_mse));
        format!(
            "split {}, {} mixtures of {} sources, {:?} extractor, {:?} classifier, {} pooling\n{head}\n{row}\n",
            self.split.name(),
            self.samples,
            self.n_sources,
            self.variant,
            self.classifier_variant,
            self.pooling
        )
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let json = dir.join(REPORT_FILE);
        let text = dir.join(TABLE_FILE);
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::file(&json, e))?;
        fs::write(&text, self.table()).map_err(|e| Error::file(&text, e))?;
        Ok((json, text))
    }
}

/// Per-mixture quantities computed by [`evaluate_models`].
struct SampleEval {
    mse: f64,
    cce: Option<f64>,
    pooled: Option<Vec<f64>>,
    speakers: Vec<usize>,
}

fn references_tensor<T: Element>(sample: &MixtureSample) -> Result<Tensor<T>> {
    let frames = sample.mixture.frames();
    let data: Vec<f64> = sample.references.iter().flat_map(|r| r.data().iter().copied()).collect();
    Ok(Tensor::from_f64(vec![sample.references.len(), BINS, frames], &data)?)
}

fn eval_sample<T: Element>(models: &Models<T>, sample: &MixtureSample, with_classifier: bool) -> Result<SampleEval> {
    let mut tape = Tape::<T>::new();
    let x = tape.constant(sample.mixture.to_tensor());
    let est = models.extractor.forward(&mut tape, x)?;
    let ev = tape.value(est).to_f64_vec();
    let per = ev.len() / sample.references.len();
    let estimates: Vec<&[f64]> = ev.chunks(per).collect();
    let references: Vec<&[f64]> = sample.references.iter().map(|r| r.data()).collect();
    let mse = pit_mse(&estimates, &references)?.loss;
    let (cce, pooled) = if with_classifier {
        let probs = models.classifier.siamese_apply(&mut tape, est)?;
        let pred = PredictionMatrix::from_tensor(tape.value(probs));
        (Some(maxpool_cce(&pred, &sample.targets)?), Some(pred.pooled()))
    } else {
        (None, None)
    };
    Ok(SampleEval {
        mse,
        cce,
        pooled,
        speakers: sample.speakers.clone(),
    })
}

/// The `index`-th evaluation mixture of `split`, as scored by
/// [`evaluate_models`].
pub fn eval_mixture(cfg: &RunConfig, corpus: &Corpus, split: Split, index: usize) -> Result<MixtureSample> {
    corpus.make_mixture(split, index, cfg.n_sources(), key(cfg.trainer.seed, &[SEED_EVAL]))
}

/// Mixture count evaluated on `split`, optionally capped.
pub fn eval_count(corpus: &Corpus, split: Split, limit: Option<usize>) -> Result<usize> {
    let len = corpus.split(split).len();
    if len == 0 {
        return Err(Error::invalid(format!("split {} is empty", split.name())));
    }
    Ok(limit.map_or(len, |l| l.min(len)))
}

/// Runs both models over the first `limit` mixtures of `split` (all when
/// `None`). Mixture partners are fixed by the trainer seed, so every call
/// with the same arguments scores the same mixtures.
pub fn evaluate_models<T: Element>(
    cfg: &RunConfig,
    models: &Models<T>,
    corpus: &Corpus,
    split: Split,
    limit: Option<usize>,
) -> Result<EvalReport> {
    let n = cfg.n_sources();
    let count = eval_count(corpus, split, limit)?;
    let evals = (0..count)
        .into_par_iter()
        .map(|i| eval_sample(models, &eval_mixture(cfg, corpus, split, i)?, true))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Vec<f64>> = evals.iter().map(|e| e.pooled.clone().expect("classifier ran")).collect();
    let targets: Vec<Vec<usize>> = evals.iter().map(|e| e.speakers.clone()).collect();
    let accuracy = (1..=n)
        .map(|m| {
            Ok(Accuracy {
                m,
                n,
                percent: mn_accuracy(&pooled, &targets, m, n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&SampleEval) -> f64| evals.iter().map(f).sum::<f64>() / count as f64;
    Ok(EvalReport {
        split,
        n_sources: n,
        samples: count,
        accuracy,
        mean_mse: mean(&|e| e.mse),
        mean_cce: mean(&|e| e.cce.unwrap_or(0.0)),
        pooling: POOLING_TAG.into(),
        variant: cfg.extractor.variant,
        classifier_variant: cfg.classifier.variant,
        config_hash: cfg.hash(),
        model_hash: cfg.model_hash(),
        corpus_hash: cfg.corpus_hash(),
    })
}

/// Mean validation MSE of the extractor alone.
fn validate_extractor<T: Element>(cfg: &RunConfig, models: &Models<T>, corpus: &Corpus) -> Result<ValMetrics> {
    let count = eval_count(corpus, Split::Validation, cfg.trainer.val_mixtures)?;
    let mses = (0..count)
        .into_par_iter()
        .map(|i| Ok(eval_sample(models, &eval_mixture(cfg, corpus, Split::Validation, i)?, false)?.mse))
        .collect::<Result<Vec<f64>>>()?;
    let mse = mses.iter().sum::<f64>() / count as f64;
    Ok(ValMetrics {
        loss: mse,
        mse,
        cce: None,
        accuracy: Vec::new(),
        samples: count,
    })
}

fn validate<T: Element>(cfg: &RunConfig, stage: Stage, models: &Models<T>, corpus: &Corpus) -> Result<(ValMetrics, Option<EvalReport>)> {
    if stage == Stage::PretrainExtractor {
        return Ok((validate_extractor(cfg, models, corpus)?, None));
    }
    let report = evaluate_models(cfg, models, corpus, Split::Validation, cfg.trainer.val_mixtures)?;
    let loss = match stage {
        Stage::Joint => cfg.trainer.alpha_for(cfg.n_sources()) * report.mean_mse + report.mean_cce,
        _ => report.mean_cce,
    };
    let metrics = ValMetrics {
        loss,
        mse: report.mean_mse,
        cce: Some(report.mean_cce),
        accuracy: report.accuracy.clone(),
        samples: report.samples,
    };
    Ok((metrics, Some(report)))
}

/// Loss components of one step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub mse: Option<f64>,
    pub cce: Option<f64>,
    pub total: f64,
}

/// Records the stage's loss for one mixture. Returns the scalar to
/// differentiate and its components.
pub fn sample_loss<T: Element>(
    tape: &mut Tape<T>,
    models: &Models<T>,
    stage: Stage,
    sample: &MixtureSample,
    alpha: f64,
) -> Result<(Var, StepLosses)> {
    let x = tape.constant(sample.mixture.to_tensor());
    let est = models.extractor.forward(tape, x)?;
    let value = |tape: &Tape<T>, v: Var| tape.value(v).item().expect("scalar loss").as_f64();
    match stage {
        Stage::PretrainExtractor => {
            let refs = tape.constant(references_tensor(sample)?);
            let (loss, _) = pit_mse_tape(tape, est, refs)?;
            let mse = value(tape, loss);
            Ok((loss, StepLosses { mse: Some(mse), cce: None, total: mse }))
        }
        Stage::PretrainClassifier => {
            let probs = models.classifier.siamese_apply(tape, est)?;
            let loss = maxpool_cce_tape(tape, probs, &sample.targets)?;
            let cce = value(tape, loss);
            Ok((loss, StepLosses { mse: None, cce: Some(cce), total: cce }))
        }
        Stage::Joint => {
            let refs = tape.constant(references_tensor(sample)?);
            let (mse_var, _) = pit_mse_tape(tape, est, refs)?;
            let probs = models.classifier.siamese_apply(tape, est)?;
            let cce_var = maxpool_cce_tape(tape, probs, &sample.targets)?;
            let loss = crate::objectives::joint_loss_tape(tape, mse_var, cce_var, alpha)?;
            let (mse, cce) = (value(tape, mse_var), value(tape, cce_var));
            Ok((loss, StepLosses { mse: Some(mse), cce: Some(cce), total: value(tape, loss) }))
        }
    }
}

/// Optimizer state for the stores a stage updates.
pub struct Optimizers<T: Element> {
    pub extractor: Option<Optimizer<T>>,
    pub classifier: Option<Optimizer<T>>,
}

impl<T: Element> Optimizers<T> {
    /// Sets trainability on `models` for `stage` and creates matching
    /// optimizers.
    pub fn for_stage(cfg: &RunConfig, stage: Stage, models: &mut Models<T>) -> Self {
        let lr = stage.lr(cfg);
        let train_extractor = stage != Stage::PretrainClassifier;
        let train_classifier = stage != Stage::PretrainExtractor;
        models.extractor.store.set_trainable(train_extractor);
        models.classifier.store.set_trainable(train_classifier);
        Optimizers {
            extractor: train_extractor.then(|| Optimizer::adam(&models.extractor.store, lr)),
            classifier: train_classifier.then(|| Optimizer::adam(&models.classifier.store, lr)),
        }
    }

    fn steps(&self) -> u64 {
        self.extractor.as_ref().or(self.classifier.as_ref()).map_or(0, Optimizer::steps)
    }

    fn state(&self, models: &Models<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(o) = &self.extractor {
            out.extend(o.state_tensors(&models.extractor.store, "optim"));
        }
        if let Some(o) = &self.classifier {
            out.extend(o.state_tensors(&models.classifier.store, "optim"));
        }
        out
    }

    fn restore(&mut self, models: &Models<T>, tensors: &[(String, Tensor<T>)], step: u64) -> Result<()> {
        if let Some(o) = &mut self.extractor {
            o.restore(&models.extractor.store, "optim", tensors, step)?;
        }
        if let Some(o) = &mut self.classifier {
            o.restore(&models.classifier.store, "optim", tensors, step)?;
        }
        Ok(())
    }
}

/// One optimizer update from the mean gradient over `batch`.
pub fn train_step<T: Element>(
    models: &mut Models<T>,
    optimizers: &mut Optimizers<T>,
    stage: Stage,
    batch: &[MixtureSample],
    alpha: f64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    models.extractor.store.zero_grad();
    models.classifier.store.zero_grad();
    let (mut mse, mut cce, mut total) = (0.0, 0.0, 0.0);
    let mut parts = StepLosses { mse: None, cce: None, total: 0.0 };
    for sample in batch {
        let mut tape = Tape::new();
        let (loss, l) = sample_loss(&mut tape, models, stage, sample, alpha)?;
        let grads = tape.backward(loss)?;
        models.extractor.store.accumulate(&grads);
        models.classifier.store.accumulate(&grads);
        mse += l.mse.unwrap_or(0.0);
        cce += l.cce.unwrap_or(0.0);
        total += l.total;
        parts = l;
    }
    let inv = 1.0 / batch.len() as f64;
    if let Some(o) = &mut optimizers.extractor {
        models.extractor.store.scale_grads(inv);
        o.step(&mut models.extractor.store)?;
    }
    if let Some(o) = &mut optimizers.classifier {
        models.classifier.store.scale_grads(inv);
        o.step(&mut models.classifier.store)?;
    }
    let losses = StepLosses {
        mse: parts.mse.map(|_| mse * inv),
        cce: parts.cce.map(|_| cce * inv),
        total: total * inv,
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("{stage} loss")));
    }
    Ok(losses)
}

/// Training-split index of the `k`-th mixture of `epoch`: first sources
/// are walked in split order, continuing across epochs.
pub fn epoch_index(epoch: usize, k: usize, per_epoch: usize, len: usize) -> usize {
    ((epoch - 1) * per_epoch + k) % len
}

/// Partner-selection seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    key(seed, &[SEED_TRAIN, epoch as u64])
}

struct Log {
    path: PathBuf,
    records: Vec<LogRecord>,
}

impl Log {
    fn push(&mut self, record: LogRecord) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::file(&self.path, e))?;
        writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::file(&self.path, e))?;
        self.records.push(record);
        Ok(())
    }
}

/// Result of running one stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub dir: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub log: Vec<LogRecord>,
}

fn with_context(e: Error, stage: Stage, epoch: usize, step: u64) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} during {stage}, epoch {epoch}, step {step}")),
        other => other,
    }
}

/// Runs `stage` to completion. The prerequisite stage's best checkpoint
/// must exist. With `resume`, continues from `<stage>/last` if present.
pub fn run_stage<T: Element>(cfg: &RunConfig, corpus: &Corpus, stage: Stage, resume: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    if corpus.manifest().corpus_hash != cfg.corpus_hash() {
        return Err(Error::HashMismatch {
            what: "corpus",
            expected: cfg.corpus_hash(),
            found: corpus.manifest().corpus_hash.clone(),
        });
    }
    let root = &cfg.trainer.checkpoint_dir;
    fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
    let dir = stage.dir(cfg);
    let last = dir.join(LAST_DIR);

    let mut models = match stage.prerequisite() {
        None => Models::<T>::new(cfg),
        Some(pre) => {
            let pre_dir = pre.dir(cfg);
            if !pre_dir.join(checkpoint::MANIFEST_FILE).exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "stage {stage} needs a {pre} checkpoint in {}; run --stage {pre} first",
                    pre_dir.display()
                )));
            }
            Models::load(cfg, &pre_dir)?.0
        }
    };
    let mut optimizers = Optimizers::for_stage(cfg, stage, &mut models);
    let mut state = ResumeState::default();
    let mut step = 0u64;
    if resume && last.join(checkpoint::MANIFEST_FILE).exists() {
        let (tensors, info) = load_checkpoint::<T>(cfg, &last)?;
        models.load_values(&tensors)?;
        optimizers.restore(&models, &tensors, info.step)?;
        state = info.resume;
        step = info.step;
    }

    let mut log = Log {
        path: root.join(LOG_FILE),
        records: Vec::new(),
    };
    let alpha = cfg.trainer.alpha_for(cfg.n_sources());
    let t = &cfg.trainer;
    let train_len = corpus.split(Split::Train).len();
    if train_len == 0 {
        return Err(Error::invalid("training split is empty"));
    }

    // Joint fine-tuning keeps the pretrained models unless validation improves.
    if stage == Stage::Joint && state.best_loss.is_none() {
        let (metrics, report) = validate(cfg, stage, &models, corpus)?;
        state.best_loss = Some(metrics.loss);
        save_models(&dir, &models, Vec::new(), &checkpoint_info(cfg, stage, 0, step, report, state.clone()))?;
        log.push(LogRecord {
            stage,
            epoch: 0,
            step,
            mse: None,
            cce: None,
            total: metrics.loss,
            val_metrics: Some(metrics),
        })?;
    }

    let total_epochs = stage.epochs(cfg);
    while !state.stopped && state.epochs_done < total_epochs {
        let epoch = state.epochs_done + 1;
        let seed = epoch_seed(t.seed, epoch);
        let per_epoch = t.mixtures_per_epoch;
        let (mut sum_mse, mut sum_cce, mut sum_total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut has = (false, false);
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<MixtureSample>>(2 * t.batch_size);
            let n = cfg.n_sources();
            scope.spawn(move || {
                for k in 0..per_epoch {
                    let idx = epoch_index(epoch, k, per_epoch, train_len);
                    if tx.send(corpus.make_mixture(Split::Train, idx, n, seed)).is_err() {
                        return;
                    }
                }
            });
            let mut batch = Vec::with_capacity(t.batch_size);
            let mut received = 0;
            for sample in rx.iter() {
                batch.push(sample?);
                received += 1;
                if batch.len() == t.batch_size || received == per_epoch {
                    let l = train_step(&mut models, &mut optimizers, stage, &batch, alpha)
                        .map_err(|e| with_context(e, stage, epoch, step + 1))?;
                    batch.clear();
                    step = optimizers.steps();
                    sum_mse += l.mse.unwrap_or(0.0);
                    sum_cce += l.cce.unwrap_or(0.0);
                    sum_total += l.total;
                    has = (l.mse.is_some(), l.cce.is_some());
                    batches += 1;
                    log.push(LogRecord {
                        stage,
                        epoch,
                        step,
                        mse: l.mse,
                        cce: l.cce,
                        total: l.total,
                        val_metrics: None,
                    })?;
                }
            }
            Ok(())
        })?;

        let (metrics, report) = validate(cfg, stage, &models, corpus).map_err(|e| with_context(e, stage, epoch, step))?;
        let b = batches.max(1) as f64;
        log.push(LogRecord {
            stage,
            epoch,
            step,
            mse: has.0.then_some(sum_mse / b),
            cce: has.1.then_some(sum_cce / b),
            total: sum_total / b,
            val_metrics: Some(metrics.clone()),
        })?;

        state.epochs_done = epoch;
        if state.best_loss.is_none_or(|best| metrics.loss < best) {
            state.best_loss = Some(metrics.loss);
            state.best_epoch = epoch;
            state.since_best = 0;
            save_models(&dir, &models, Vec::new(), &checkpoint_info(cfg, stage, epoch, step, report.clone(), state.clone()))?;
        } else {
            state.since_best += 1;
            if state.since_best >= t.patience {
                state.stopped = true;
            }
        }
        let info = checkpoint_info(cfg, stage, epoch, step, report, state.clone());
        save_models(&last, &models, optimizers.state(&models), &info)?;
    }

    Ok(StageOutcome {
        stage,
        dir,
        epochs_run: state.epochs_done,
        best_epoch: state.best_epoch,
        steps: step,
        stopped_early: state.stopped,
        log: log.records,
    })
}

fn dispatch<R>(cfg: &RunConfig, f32_run: impl FnOnce() -> Result<R>, f64_run: impl FnOnce() -> Result<R>) -> Result<R> {
    match cfg.precision {
        DType::F32 => f32_run(),
        DType::F64 => f64_run(),
    }
}

pub fn train_stage(cfg: &RunConfig, corpus: &Corpus, stage: Stage, resume: bool) -> Result<StageOutcome> {
    dispatch(
        cfg,
        || run_stage::<f32>(cfg, corpus, stage, resume),
        || run_stage::<f64>(cfg, corpus, stage, resume),
    )
}

pub fn pretrain_extractor(cfg: &RunConfig, corpus: &Corpus) -> Result<StageOutcome> {
    train_stage(cfg, corpus, Stage::PretrainExtractor, false)
}

pub fn pretrain_classifier(cfg: &RunConfig, corpus: &Corpus) -> Result<StageOutcome> {
    train_stage(cfg, corpus, Stage::PretrainClassifier, false)
}

pub fn train_joint(cfg: &RunConfig, corpus: &Corpus) -> Result<StageOutcome> {
    train_stage(cfg, corpus, Stage::Joint, false)
}

/// Evaluates the checkpoint in `dir` on `split`.
pub fn evaluate(cfg: &RunConfig, corpus: &Corpus, dir: &Path, split: Split) -> Result<EvalReport> {
    dispatch(
        cfg,
        || evaluate_models(cfg, &Models::<f32>::load(cfg, dir)?.0, corpus, split, None),
        || evaluate_models(cfg, &Models::<f64>::load(cfg, dir)?.0, corpus, split, None),
    )
}

/// The full schedule and the validation reports before and after joint
/// fine-tuning.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub stages: Vec<StageOutcome>,
    pub before_joint: EvalReport,
    pub after_joint: EvalReport,
}

impl PipelineReport {
    pub fn log(&self) -> impl Iterator<Item = &LogRecord> {
        self.stages.iter().flat_map(|s| &s.log)
    }
}

/// Runs all three stages and evaluates the classifier-stage and joint
/// checkpoints on the whole validation split.
pub fn run_pipeline(cfg: &RunConfig, corpus: &Corpus) -> Result<PipelineReport> {
    let stages = Stage::ALL
        .iter()
        .map(|&s| train_stage(cfg, corpus, s, false))
        .collect::<Result<Vec<_>>>()?;
    let before_joint = evaluate(cfg, corpus, &Stage::PretrainClassifier.dir(cfg), Split::Validation)?;
    let after_joint = evaluate(cfg, corpus, &Stage::Joint.dir(cfg), Split::Validation)?;
    Ok(PipelineReport {
        stages,
        before_joint,
        after_joint,
    })
}

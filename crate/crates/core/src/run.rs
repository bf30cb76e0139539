//! Run orchestration behind the CLI: configuration, source training, the
//! online adaptation loop, sweeps, the memory table, and replay.
//!
//! Per target batch, in order: forward pass, mixture update, per-sample
//! mixture entropies, threshold calibration (first `n_init` batches),
//! pseudo-labels, predictions, scoring, augmented views, losses, backward
//! pass, optimizer step.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gmm::GmmState;
use crate::metrics::{
    memory_report, memory_table_csv, records_from_jsonl, records_to_csv, records_to_jsonl, score_batch, summarize_window,
    MemoryModelInputs, MemoryReport, RunRecord, WindowSummary,
};
use crate::model::{ModelDims, OptimizerConfig, ToyModel};
use crate::objectives::{combine, contrastive_loss, kld_loss, ContrastiveBatch};
use crate::ood::{LikelihoodVec, PseudoLabel, ThresholdState};
use crate::simulator::{augment, make_task, DomainSpec, ShiftKind, ShiftSpec, Task, TaskSizes};

/// Diagonal load added to every mixture covariance in a run. The reduced
/// features live in 64 dimensions while early batches hold 64 samples, so the
/// library minimum of `1e-6` leaves near-singular modes whose posteriors
/// underflow to exact one-hot vectors.
pub const DEFAULT_RUN_JITTER: f64 = 0.1;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "GMM_ADAPT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Both,
    ContrastiveOnly,
    KldOnly,
    None,
}

impl LossMode {
    pub fn uses_contrastive(self) -> bool {
        matches!(self, LossMode::Both | LossMode::ContrastiveOnly)
    }

    pub fn uses_kld(self) -> bool {
        matches!(self, LossMode::Both | LossMode::KldOnly)
    }
}

/// Source pre-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub per_class: usize,
    pub holdout_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { per_class: 200, holdout_per_class: 100, epochs: 20, batch_size: 32, lr: 0.02, momentum: 0.9 }
    }
}

/// Full configuration of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub shift: ShiftSpec,
    pub domain: DomainSpec,
    pub source: SourceConfig,
    pub fd: usize,
    pub fd_r: usize,
    pub batch_size: usize,
    pub p_reject: f64,
    pub n_init: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub n_batches: usize,
    pub loss_mode: LossMode,
    pub unknown_positive_pairs: bool,
    /// Standard deviation of the additive input noise used as augmentation.
    /// `None` means one tenth of the pooled source input standard deviation.
    pub augment_sigma: Option<f64>,
    pub gmm_jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            shift: ShiftSpec::opda(6, 3, 3),
            domain: DomainSpec {
                d_in: 20,
                class_sep: 4.0,
                rotation_seed: 1,
                rotation_angle: 0.9,
                shift_translation: vec![0.5; 20],
                noise_sigma_source: 1.0,
                noise_sigma_target: 1.2,
            },
            source: SourceConfig::default(),
            fd: 256,
            fd_r: 64,
            batch_size: 64,
            p_reject: 50.0,
            n_init: 30,
            temperature: 0.1,
            lambda: 1.0,
            lr: 0.0001,
            momentum: 0.9,
            n_batches: 200,
            loss_mode: LossMode::Both,
            unknown_positive_pairs: false,
            augment_sigma: None,
            gmm_jitter: DEFAULT_RUN_JITTER,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        self.domain.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.shift.n_source_classes() < 2 {
            return cfg("at least two source classes are required".into());
        }
        if self.fd == 0 || self.fd_r == 0 {
            return cfg("fd and fd_r must be positive".into());
        }
        if self.batch_size < 4 {
            return cfg(format!("batch_size must be at least 4, got {}", self.batch_size));
        }
        if !(self.p_reject > 0.0 && self.p_reject < 100.0) {
            return cfg(format!("p_reject must be in (0, 100), got {}", self.p_reject));
        }
        if self.n_init == 0 {
            return cfg("n_init must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return cfg("temperature must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return cfg("lambda must be non-negative".into());
        }
        if self.n_batches == 0 {
            return cfg("n_batches must be positive".into());
        }
        if !(self.gmm_jitter >= 0.0) {
            return cfg("gmm_jitter must be non-negative".into());
        }
        if let Some(s) = self.augment_sigma {
            if !(s >= 0.0) {
                return cfg("augment_sigma must be non-negative".into());
            }
        }
        if self.source.batch_size == 0 || self.source.per_class == 0 {
            return cfg("source per_class and batch_size must be positive".into());
        }
        self.optimizer().validate()?;
        OptimizerConfig { learning_rate: self.source.lr, momentum: self.source.momentum }.validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims { d_in: self.domain.d_in, fd: self.fd, fd_r: self.fd_r, n_classes: self.shift.n_source_classes() }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig { learning_rate: self.lr, momentum: self.momentum }
    }

    pub fn sizes(&self) -> TaskSizes {
        TaskSizes {
            source_per_class: self.source.per_class,
            holdout_per_class: self.source.holdout_per_class,
            target_samples: self.n_batches * self.batch_size,
            batch_size: self.batch_size,
        }
    }

    pub fn task(&self) -> Result<Task<f64>> {
        make_task(&self.shift, &self.domain, &self.sizes(), self.seed)
    }

    /// Parses a JSON document, filling missing keys with defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::with_overrides(Some(text), &[])
    }

    /// Merges `--key value` style overrides into a JSON config. Dashes in
    /// keys become underscores; dots address nested objects.
    pub fn with_overrides(base: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(text) = base {
            let user = serde_json::from_str::<Value>(text)?;
            if !user.is_object() {
                return Err(Error::Config("config must be a JSON object".into()));
            }
            merge(&mut doc, &user);
        }
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_value(raw))?;
        }
        Ok(serde_json::from_value(doc)?)
    }
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                merge(d.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (d, s) => *d = s.clone(),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let key = key.trim_start_matches('-').replace('-', "_");
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config(format!("cannot set {key}")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Ok(())
}

/// Source model plus what the run needs to know about the source domain.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub model: ToyModel<f64>,
    pub holdout_accuracy: f64,
    pub loss_history: Vec<f64>,
    /// Pooled standard deviation of the source inputs.
    pub input_std: f64,
}

fn pooled_std(inputs: &[Vec<f64>]) -> f64 {
    let n: usize = inputs.iter().map(Vec::len).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = inputs.iter().flatten().sum::<f64>() / n as f64;
    (inputs.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Trains the source model for `cfg` from scratch.
pub fn train_source_model(cfg: &RunConfig) -> Result<SourceModel> {
    cfg.validate()?;
    let task = cfg.task()?;
    let mut model = ToyModel::new(cfg.dims(), cfg.seed);
    let opt = OptimizerConfig { learning_rate: cfg.source.lr, momentum: cfg.source.momentum };
    let loss_history = model.train_source(
        &task.source_train.inputs,
        &task.source_train.labels,
        cfg.source.epochs,
        cfg.source.batch_size,
        &opt,
        cfg.seed,
    )?;
    model.reset_velocity();
    let holdout_accuracy = model.accuracy(&task.source_holdout.inputs, &task.source_holdout.labels)?;
    Ok(SourceModel { model, holdout_accuracy, loss_history, input_std: pooled_std(&task.source_train.inputs) })
}

/// Metadata stored next to a source checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub config: RunConfig,
    pub holdout_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub input_std: f64,
}

pub const SOURCE_REPORT: &str = "source.json";

pub fn write_source_dir(dir: &Path, cfg: &RunConfig, source: &SourceModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let report = SourceReport {
        config: cfg.clone(),
        holdout_accuracy: source.holdout_accuracy,
        loss_history: source.loss_history.clone(),
        input_std: source.input_std,
    };
    fs::write(dir.join(SOURCE_REPORT), pretty(&report)?)?;
    fs::write(dir.join(files::MODEL), serde_json::to_string(&source.model.to_checkpoint())?)?;
    Ok(())
}

pub fn load_source_dir(dir: &Path) -> Result<SourceModel> {
    let report: SourceReport = serde_json::from_str(&fs::read_to_string(dir.join(SOURCE_REPORT))?)?;
    let ckpt = serde_json::from_str(&fs::read_to_string(dir.join(files::MODEL))?)?;
    Ok(SourceModel {
        model: ToyModel::from_checkpoint(ckpt)?,
        holdout_accuracy: report.holdout_accuracy,
        loss_history: report.loss_history,
        input_std: report.input_std,
    })
}

/// Values that only exist once a run has finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedValues {
    pub d_in: usize,
    pub n_source_classes: usize,
    pub augment_sigma: f64,
    pub source_holdout_accuracy: f64,
    pub tau_k: f64,
    pub tau_u: f64,
    pub tau: f64,
    pub thresholds_frozen: bool,
    pub gmm_memory_values: usize,
}

/// Config echo written next to the run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub derived: DerivedValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub loss_mode: LossMode,
    pub shift_kind: ShiftKind,
    pub n_batches: usize,
    /// H-score over the whole run (ODA/OPDA headline metric).
    pub h_score: Option<f64>,
    /// Plain accuracy over the whole run (PDA headline metric).
    pub accuracy: Option<f64>,
    pub full_run: WindowSummary,
    pub post_calibration: WindowSummary,
    pub tau_k: f64,
    pub tau_u: f64,
    pub tau: f64,
    pub thresholds_frozen: bool,
    pub warnings: Vec<String>,
    pub gmm_memory_values: usize,
}

/// Summary as a pure function of the config and the per-batch records.
pub fn summarize(cfg: &RunConfig, records: &[RunRecord]) -> RunSummary {
    let full_run = summarize_window(records);
    let post_calibration = summarize_window(records.iter().filter(|r| r.batch >= cfg.n_init));
    let (tau_k, tau_u) = records.last().map_or((0.0, 1.0), |r| (r.tau_k, r.tau_u));
    let thresholds_frozen = records.len() >= cfg.n_init;
    let mut warnings = Vec::new();
    if !thresholds_frozen {
        warnings.push(format!("thresholds not frozen: {} batches < n_init {}", records.len(), cfg.n_init));
    }
    RunSummary {
        seed: cfg.seed,
        loss_mode: cfg.loss_mode,
        shift_kind: cfg.shift.kind,
        n_batches: records.len(),
        h_score: full_run.h_score,
        accuracy: full_run.accuracy,
        full_run,
        post_calibration,
        tau_k,
        tau_u,
        tau: (tau_k + tau_u) / 2.0,
        thresholds_frozen,
        warnings,
        gmm_memory_values: crate::gmm::gmm_value_count(cfg.fd_r, cfg.shift.n_source_classes()),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub summary: RunSummary,
    pub resolved: ResolvedConfig,
    pub model: ToyModel<f64>,
    pub gmm: GmmState<f64>,
    pub thresholds: ThresholdState<f64>,
}

fn numerical(batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical { .. } => e,
        other => Error::Numerical { batch, source: Box::new(other) },
    }
}

/// Online adaptation starting from an already trained source model.
pub fn adapt_with_source(cfg: &RunConfig, source: &SourceModel) -> Result<RunOutcome> {
    cfg.validate()?;
    if source.model.dims() != cfg.dims() {
        return Err(Error::Config("source model dimensions do not match the config".into()));
    }
    let task = cfg.task()?;
    let k = cfg.shift.n_source_classes();
    let augment_sigma = cfg.augment_sigma.unwrap_or(0.1 * source.input_std);
    let opt = cfg.optimizer();

    let mut model = source.model.clone();
    model.reset_velocity();
    let mut gmm = GmmState::new(k, cfg.fd_r, cfg.gmm_jitter);
    let mut thresholds = ThresholdState::new(cfg.p_reject, cfg.n_init)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(7);
    let mut records = Vec::with_capacity(cfg.n_batches);

    for batch in task.target.take(cfg.n_batches) {
        let b = batch.batch_index;
        let err = numerical(b);
        let caches = model.forward_batch(&batch.inputs).map_err(&err)?;
        let feats: Vec<Vec<f64>> = caches.iter().map(|c| c.reduced.clone()).collect();
        let soft: Vec<Vec<f64>> = caches.iter().map(|c| c.softmax.clone()).collect();
        gmm.update(&feats, &soft).map_err(&err)?;

        let mut entropies = Vec::with_capacity(feats.len());
        let mut best = Vec::with_capacity(feats.len());
        for r in &feats {
            let lv = LikelihoodVec::from_log_likelihoods(&gmm.class_log_likelihoods(r).map_err(&err)?).map_err(&err)?;
            entropies.push(lv.entropy());
            best.push(lv.argmax());
        }
        if !thresholds.is_frozen() {
            thresholds.calibrate(&entropies).map_err(&err)?;
        }
        let labels: Vec<PseudoLabel> =
            entropies.iter().zip(&best).map(|(&e, &c)| thresholds.gate(e, c)).collect::<Result<_>>().map_err(&err)?;
        let preds = soft
            .iter()
            .zip(&entropies)
            .map(|(s, &e)| thresholds.predict_with_entropy(s, e))
            .collect::<Result<Vec<_>>>()
            .map_err(&err)?;
        let mut record = score_batch(b, &batch.true_labels, &preds, &labels).map_err(&err)?;
        record.tau_k = thresholds.tau_k;
        record.tau_u = thresholds.tau_u;

        let any_labeled = labels.iter().any(|l| !l.is_discarded());
        if cfg.loss_mode != LossMode::None && any_labeled {
            let n = caches.len();
            let contrastive = if cfg.loss_mode.uses_contrastive() {
                let aug_inputs: Vec<Vec<f64>> =
                    batch.inputs.iter().map(|x| augment(x, augment_sigma, &mut aug_rng)).collect();
                let aug_caches = model.forward_batch(&aug_inputs).map_err(&err)?;
                let mut reduced = feats.clone();
                reduced.extend(aug_caches.iter().map(|c| c.reduced.clone()));
                let mut pair_labels = labels.clone();
                pair_labels.extend_from_slice(&labels);
                let prototypes = gmm.means();
                let res = contrastive_loss(&ContrastiveBatch {
                    reduced: &reduced,
                    labels: &pair_labels,
                    prototypes: &prototypes,
                    temperature: cfg.temperature,
                    unknown_positives: cfg.unknown_positive_pairs,
                })
                .map_err(&err)?;
                Some((res, aug_caches))
            } else {
                None
            };
            let kld = if cfg.loss_mode.uses_kld() { Some(kld_loss(&soft, &labels).map_err(&err)?) } else { None };
            let combined = combine(contrastive.as_ref().map(|(c, _)| c), kld.as_ref(), cfg.lambda, n).map_err(&err)?;
            let mut all_caches = caches;
            if let Some((_, aug)) = contrastive {
                all_caches.extend(aug);
            }
            let grads = model.backward(&all_caches, &combined.grads).map_err(&err)?;
            model.sgd_step(&grads, &opt).map_err(&err)?;
            record.loss_c = combined.contrastive;
            record.loss_kld = combined.kld;
        }
        records.push(record);
    }

    let summary = summarize(cfg, &records);
    let resolved = ResolvedConfig {
        config: cfg.clone(),
        derived: DerivedValues {
            d_in: cfg.domain.d_in,
            n_source_classes: k,
            augment_sigma,
            source_holdout_accuracy: source.holdout_accuracy,
            tau_k: thresholds.tau_k,
            tau_u: thresholds.tau_u,
            tau: thresholds.tau(),
            thresholds_frozen: thresholds.is_frozen(),
            gmm_memory_values: gmm.memory_footprint(),
        },
    };
    Ok(RunOutcome { records, summary, resolved, model, gmm, thresholds })
}

/// Trains the source model, adapts, and writes the run directory when `out_dir` is given.
pub fn run_adapt(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let source = train_source_model(cfg)?;
    let outcome = adapt_with_source(cfg, &source)?;
    if let Some(dir) = out_dir {
        write_run_dir(dir, &outcome)?;
    }
    Ok(outcome)
}

pub mod files {
    pub const CONFIG: &str = "config.resolved.json";
    pub const METRICS_JSONL: &str = "metrics.jsonl";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const THRESHOLDS: &str = "thresholds.csv";
    pub const MODEL: &str = "model.ckpt";
    pub const GMM: &str = "gmm.ckpt";
    pub const SUMMARY: &str = "summary.json";
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_run_dir(dir: &Path, out: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(files::CONFIG), pretty(&out.resolved)?)?;
    fs::write(dir.join(files::METRICS_JSONL), records_to_jsonl(&out.records)?)?;
    fs::write(dir.join(files::METRICS_CSV), records_to_csv(&out.records))?;
    let mut th = String::from("batch,tau_k,tau_u\n");
    for r in &out.records {
        th.push_str(&format!("{},{},{}\n", r.batch, r.tau_k, r.tau_u));
    }
    fs::write(dir.join(files::THRESHOLDS), th)?;
    fs::write(dir.join(files::MODEL), serde_json::to_string(&out.model.to_checkpoint())?)?;
    fs::write(dir.join(files::GMM), serde_json::to_string(&out.gmm.to_snapshot())?)?;
    fs::write(dir.join(files::SUMMARY), pretty(&out.summary)?)?;
    Ok(())
}

/// Result of re-scoring a stored run.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub summary: RunSummary,
    pub rendered: String,
    pub matches_stored: bool,
}

/// Recomputes `summary.json` from the stored config echo and metric log.
pub fn replay(dir: &Path) -> Result<ReplayOutcome> {
    let resolved: ResolvedConfig = serde_json::from_str(&fs::read_to_string(dir.join(files::CONFIG))?)?;
    let records = records_from_jsonl(&fs::read_to_string(dir.join(files::METRICS_JSONL))?)?;
    let summary = summarize(&resolved.config, &records);
    let rendered = pretty(&summary)?;
    let stored = fs::read_to_string(dir.join(files::SUMMARY)).unwrap_or_default();
    Ok(ReplayOutcome { matches_stored: stored == rendered, summary, rendered })
}

/// Memory comparison for every class count in `classes`.
pub fn run_memory(base: &MemoryModelInputs, classes: std::ops::RangeInclusive<usize>) -> Result<Vec<MemoryReport>> {
    if classes.is_empty() {
        return Err(Error::Config("empty class range".into()));
    }
    classes.map(|n_classes| memory_report(&MemoryModelInputs { n_classes, ..*base })).collect()
}

pub fn memory_csv(rows: &[MemoryReport]) -> String {
    memory_table_csv(rows)
}

/// Hyperparameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    FdR,
    PReject,
    NInit,
    BatchSize,
    Lambda,
    Temperature,
    Lr,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fd_r" => SweepParam::FdR,
            "p_reject" => SweepParam::PReject,
            "n_init" => SweepParam::NInit,
            "n_b" | "batch_size" => SweepParam::BatchSize,
            "lambda" => SweepParam::Lambda,
            "temperature" => SweepParam::Temperature,
            "lr" => SweepParam::Lr,
            other => return Err(Error::Config(format!("unknown sweep parameter: {other}"))),
        })
    }
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::FdR => "fd_r",
            SweepParam::PReject => "p_reject",
            SweepParam::NInit => "n_init",
            SweepParam::BatchSize => "batch_size",
            SweepParam::Lambda => "lambda",
            SweepParam::Temperature => "temperature",
            SweepParam::Lr => "lr",
        }
    }

    fn apply(self, cfg: &mut RunConfig, v: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {v}", self.name())))
            }
        };
        match self {
            SweepParam::FdR => cfg.fd_r = count(v)?,
            SweepParam::PReject => cfg.p_reject = v,
            SweepParam::NInit => cfg.n_init = count(v)?,
            SweepParam::BatchSize => cfg.batch_size = count(v)?,
            SweepParam::Lambda => cfg.lambda = v,
            SweepParam::Temperature => cfg.temperature = v,
            SweepParam::Lr => cfg.lr = v,
        }
        Ok(())
    }
}

/// One row of a sweep table: mean summary metrics over the repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub compensated: bool,
    pub n_init: usize,
    pub repeats: usize,
    pub mean_h_score: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub mean_acc_known: Option<f64>,
    pub mean_acc_unknown: Option<f64>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every `(value, repeat)` pair with seeds `base.seed + repeat`. With
/// `compensate` and a batch-size sweep, each value is run twice: as given and
/// with `n_init` scaled to keep `n_init * batch_size` constant.
pub fn run_sweep(base: &RunConfig, param: SweepParam, values: &[f64], repeats: usize, compensate: bool) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("no sweep values".into()));
    }
    let mut variants = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, v)?;
        variants.push((v, false, cfg.clone()));
        if compensate && param == SweepParam::BatchSize {
            let scaled = (base.n_init as f64 * base.batch_size as f64 / cfg.batch_size as f64).round().max(1.0);
            cfg.n_init = scaled as usize;
            variants.push((v, true, cfg));
        }
    }
    for (_, _, cfg) in &variants {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, RunConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, (_, _, cfg))| {
            (0..repeats).map(move |r| {
                let mut c = cfg.clone();
                c.seed = base.seed + r as u64;
                (i, c)
            })
        })
        .collect();
    let summaries: Vec<(usize, RunSummary)> = jobs
        .par_iter()
        .map(|(i, cfg)| run_adapt(cfg, None).map(|o| (*i, o.summary)))
        .collect::<Result<_>>()?;

    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, (v, compensated, cfg))| {
            let s: Vec<&RunSummary> = summaries.iter().filter(|(j, _)| *j == i).map(|(_, s)| s).collect();
            SweepRow {
                parameter: param.name().to_string(),
                value: *v,
                compensated: *compensated,
                n_init: cfg.n_init,
                repeats,
                mean_h_score: mean(s.iter().map(|s| s.h_score)),
                mean_accuracy: mean(s.iter().map(|s| s.accuracy)),
                mean_acc_known: mean(s.iter().map(|s| s.full_run.acc_known)),
                mean_acc_unknown: mean(s.iter().map(|s| s.full_run.acc_unknown)),
            }
        })
        .collect())
}

pub const SWEEP_CSV_HEADER: &str =
    "parameter,value,compensated,n_init,repeats,mean_h_score,mean_accuracy,mean_acc_known,mean_acc_unknown";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.parameter,
            r.value,
            r.compensated,
            r.n_init,
            r.repeats,
            o(r.mean_h_score),
            o(r.mean_accuracy),
            o(r.mean_acc_known),
            o(r.mean_acc_unknown)
        ));
    }
    out
}

/// Default output root: `$GMM_ADAPT_OUT` or `runs/`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

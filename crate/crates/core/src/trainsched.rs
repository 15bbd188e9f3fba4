//! Sequential cluster training: one phase per fold with weights carried
//! across phase boundaries, then a fine-tuning phase on the full set.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{Fold, Manifest};
use crate::error::{Error, Result};
use crate::heads::checkpoint::{decode_blob, encode_blob, read_meta, sidecar_path, write_atomic};
use crate::heads::ModelBundle;
use crate::metrics::{evaluate, DcfParams, MetricReport, ScoredSet};
use crate::nn;
use crate::types::{DecisionPolicy, ImageSample, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseDataset {
    /// Zero-based fold index; displayed one-based.
    Fold(usize),
    Full,
}

impl fmt::Display for PhaseDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseDataset::Fold(i) => write!(f, "fold_{}", i + 1),
            PhaseDataset::Full => f.write_str("FULL"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    /// One-based.
    pub index: usize,
    pub dataset: PhaseDataset,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

/// `k` fold phases of `epochs_per_phase` epochs, then one full-set phase.
pub fn make_schedule(k: usize, epochs_per_phase: usize, finetune_epochs: usize) -> Result<Schedule> {
    if k == 0 || epochs_per_phase == 0 || finetune_epochs == 0 {
        return Err(Error::config(format!(
            "schedule arguments must be positive (k={k}, epochs={epochs_per_phase}, finetune={finetune_epochs})"
        )));
    }
    let mut phases: Vec<Phase> = (0..k)
        .map(|i| Phase {
            index: i + 1,
            dataset: PhaseDataset::Fold(i),
            epochs: epochs_per_phase,
        })
        .collect();
    phases.push(Phase {
        index: k + 1,
        dataset: PhaseDataset::Full,
        epochs: finetune_epochs,
    });
    Ok(Schedule { phases })
}

impl Schedule {
    pub fn k(&self) -> usize {
        self.phases.len().saturating_sub(1)
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// `k` fold phases in index order followed by exactly one full phase.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let ok = !self.phases.is_empty()
            && self.phases.iter().enumerate().all(|(i, p)| {
                p.index == i + 1
                    && p.epochs > 0
                    && p.dataset
                        == if i < k {
                            PhaseDataset::Fold(i)
                        } else {
                            PhaseDataset::Full
                        }
            });
        if ok && k > 0 {
            Ok(())
        } else {
            Err(Error::config(
                "schedule must be k >= 1 ordered fold phases followed by one FULL phase",
            ))
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.phases {
            writeln!(
                f,
                "phase {:02}  {:<8} {} epochs",
                p.index,
                p.dataset.to_string(),
                p.epochs
            )?;
        }
        write!(f, "total    {} epochs", self.total_epochs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs_per_phase: usize,
    pub finetune_epochs: usize,
    /// Keep optimizer moments across phase boundaries instead of resetting.
    pub carry_optimizer_state: bool,
    /// Apply head dropout during training.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 0,
            epochs_per_phase: 3,
            finetune_epochs: 3,
            carry_optimizer_state: false,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs_per_phase == 0 || self.finetune_epochs == 0 {
            return Err(Error::config("batch_size and epoch counts must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize) -> AdamW {
        AdamW {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut flat = Vec::with_capacity(1 + 2 * self.m.len());
        flat.push(self.step as f64);
        flat.extend_from_slice(&self.m);
        flat.extend_from_slice(&self.v);
        encode_blob(&flat)
    }

    fn from_bytes(bytes: &[u8], path: &Path) -> Result<AdamW> {
        let flat = decode_blob(bytes, path)?;
        if flat.is_empty() || flat.len() % 2 != 1 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "malformed optimizer state".into(),
            });
        }
        let n = (flat.len() - 1) / 2;
        Ok(AdamW {
            step: flat[0] as u64,
            m: flat[1..1 + n].to_vec(),
            v: flat[1 + n..].to_vec(),
        })
    }
}

/// Anything with a flat parameter vector and a differentiable BCE loss.
pub trait Trainable: Send + Sync {
    fn name(&self) -> &str;

    fn params(&self) -> Result<&[f64]>;

    fn params_mut(&mut self) -> Result<&mut [f64]>;

    /// Mean BCE and its gradient; dropout (if any) draws from `rng`.
    fn loss_and_grad(&self, batch: &[ImageSample], rng: Option<&mut dyn RngCore>) -> Result<(f64, Vec<f64>)>;

    /// Evaluation-mode probabilities of "real".
    fn scores(&self, batch: &[ImageSample]) -> Result<Vec<f64>>;

    fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()>;

    fn load_weights(&mut self, path: &Path) -> Result<()>;
}

impl Trainable for ModelBundle {
    fn name(&self) -> &str {
        ModelBundle::name(self)
    }

    fn params(&self) -> Result<&[f64]> {
        ModelBundle::params(self)
    }

    fn params_mut(&mut self) -> Result<&mut [f64]> {
        ModelBundle::params_mut(self)
    }

    fn loss_and_grad(&self, batch: &[ImageSample], rng: Option<&mut dyn RngCore>) -> Result<(f64, Vec<f64>)> {
        ModelBundle::loss_and_grad(self, batch, rng)
    }

    fn scores(&self, batch: &[ImageSample]) -> Result<Vec<f64>> {
        Ok(self.forward(batch)?.into_iter().map(|s| s.value()).collect())
    }

    fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.save_with(path, extra).map(|_| ())
    }

    fn load_weights(&mut self, path: &Path) -> Result<()> {
        let meta = read_meta(path)?;
        ModelBundle::load_weights(self, path, &meta)
    }
}

/// Two-parameter logistic model on mean luminance: `p = σ(w·mean + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticStub {
    pub params: Vec<f64>,
}

impl LogisticStub {
    pub fn new(w: f64, b: f64) -> LogisticStub {
        LogisticStub { params: vec![w, b] }
    }

    pub fn feature(sample: &ImageSample) -> Result<f64> {
        Ok(sample.luminance()?.mean().unwrap_or(0.0))
    }
}

impl Trainable for LogisticStub {
    fn name(&self) -> &str {
        "logistic_stub"
    }

    fn params(&self) -> Result<&[f64]> {
        Ok(&self.params)
    }

    fn params_mut(&mut self) -> Result<&mut [f64]> {
        Ok(&mut self.params)
    }

    fn loss_and_grad(&self, batch: &[ImageSample], _rng: Option<&mut dyn RngCore>) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = batch.len() as f64;
        let (mut loss, mut gw, mut gb) = (0.0, 0.0, 0.0);
        for s in batch {
            let x = LogisticStub::feature(s)?;
            let y = s.require_label()?.target();
            let z = self.params[0] * x + self.params[1];
            loss += nn::bce_with_logit(z, y);
            let d = nn::sigmoid(z) - y;
            gw += d * x;
            gb += d;
        }
        Ok((loss / n, vec![gw / n, gb / n]))
    }

    fn scores(&self, batch: &[ImageSample]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|s| {
                Ok(nn::probability(
                    self.params[0] * LogisticStub::feature(s)? + self.params[1],
                ))
            })
            .collect()
    }

    fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        write_atomic(path, &encode_blob(&self.params))?;
        let meta = serde_json::json!({ "model": self.name(), "param_count": 2, "extra": extra });
        write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)
    }

    fn load_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let v = decode_blob(&bytes, path)?;
        if v.len() != 2 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected 2 parameters, found {}", v.len()),
            });
        }
        self.params = v;
        Ok(())
    }
}

/// SHA-256 of the exact parameter bytes.
pub fn weights_digest(params: &[f64]) -> String {
    hex::encode(Sha256::digest(encode_blob(params)))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream seed for a `(seed, phase, epoch, ...)` coordinate.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(mix(seed), |acc, &c| mix(acc ^ mix(c)))
}

/// Sample order of one epoch, fixed by `(seed, phase, epoch)`.
pub fn epoch_order(n: usize, seed: u64, phase: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[phase as u64, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub loss: f64,
    pub report: MetricReport,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub dataset: PhaseDataset,
    pub epoch: usize,
    pub train_loss: f64,
    pub step_losses: Vec<f64>,
    pub validation: Option<ValidationSummary>,
    pub checkpoint: Option<PathBuf>,
    /// Digest of the weights entering and leaving the epoch.
    pub weights_start: String,
    pub weights_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub dataset: PhaseDataset,
    pub epochs: Vec<EpochRecord>,
    /// Digest of the weights entering and leaving the phase.
    pub weights_in: String,
    pub weights_out: String,
    pub checkpoint: Option<PathBuf>,
}

impl PhaseRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

pub fn validate_model(
    model: &dyn Trainable,
    data: &[ImageSample],
    policy: DecisionPolicy,
) -> Result<ValidationSummary> {
    let scores = model.scores(data)?;
    let mut loss = 0.0;
    let mut pairs = Vec::with_capacity(data.len());
    for (s, p) in data.iter().zip(&scores) {
        let label = s.require_label()?;
        loss += nn::bce(*p, label.target(), nn::PROB_EPS);
        pairs.push((*p, label));
    }
    let set = ScoredSet::from_pairs(pairs)?;
    Ok(ValidationSummary {
        loss: loss / data.len() as f64,
        report: evaluate(&set, policy, DcfParams::default()),
    })
}

/// One seeded pass over `data`; returns the per-step losses.
pub fn train_epoch(
    model: &mut dyn Trainable,
    data: &[ImageSample],
    cfg: &TrainConfig,
    optimizer: &mut AdamW,
    phase: usize,
    epoch: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let order = epoch_order(data.len(), cfg.seed, phase, epoch);
    let mut losses = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<ImageSample> = chunk.iter().map(|&i| data[i].clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[phase as u64, epoch as u64, b as u64, 1]));
        let rng: Option<&mut dyn RngCore> = if cfg.dropout { Some(&mut rng) } else { None };
        let (loss, grad) = model.loss_and_grad(&batch, rng)?;
        if !loss.is_finite() {
            return Err(Error::State(format!(
                "non-finite loss at phase {phase} epoch {epoch} step {b}"
            )));
        }
        optimizer.update(model.params_mut()?, &grad, cfg);
        losses.push(loss);
    }
    Ok(losses)
}

/// Plain multi-epoch training on one dataset (a single-phase run).
pub fn train_epochs(
    model: &mut dyn Trainable,
    data: &[ImageSample],
    validation: Option<&[ImageSample]>,
    epochs: usize,
    cfg: &TrainConfig,
    policy: DecisionPolicy,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_dataset("training set", data)?;
    let mut optimizer = AdamW::new(model.params()?.len());
    (1..=epochs)
        .map(|e| {
            let weights_start = weights_digest(model.params()?);
            let steps = train_epoch(model, data, cfg, &mut optimizer, 1, e)?;
            Ok(EpochRecord {
                phase: 1,
                dataset: PhaseDataset::Full,
                epoch: e,
                train_loss: mean(&steps),
                step_losses: steps,
                validation: validation.map(|v| validate_model(model, v, policy)).transpose()?,
                checkpoint: None,
                weights_start,
                weights_sha256: weights_digest(model.params()?),
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_dataset(what: &str, data: &[ImageSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config(format!("{what} is empty")));
    }
    for s in data {
        s.require_label()?;
        s.pixels().map_err(|e| Error::config(format!("{what}: {e}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Checkpoints, optimizer states and the epoch log go here.
    pub out_dir: Option<PathBuf>,
    pub validation: Option<Vec<ImageSample>>,
    pub policy: DecisionPolicy,
    /// Continue from the newest checkpoint in `out_dir`, if any.
    pub resume: bool,
    /// Stop after this `(phase, epoch)` completes, simulating an interruption.
    pub halt_after: Option<(usize, usize)>,
    /// Free-form metadata embedded in every checkpoint sidecar.
    pub metadata: serde_json::Value,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: None,
            validation: None,
            policy: DecisionPolicy::default(),
            resume: false,
            halt_after: None,
            metadata: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<PhaseRecord>,
    /// True when `halt_after` stopped the run early.
    pub halted: bool,
}

pub const LOG_FILE: &str = "train_log.jsonl";

pub fn checkpoint_name(model: &str, phase: usize, epoch: usize) -> String {
    format!("{model}-phase{phase:02}-epoch{epoch:02}.ckpt")
}

fn optimizer_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("opt")
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Resolves and checks every phase's dataset before any training happens.
fn resolve<'a>(folds: &'a [Fold], full: &'a Manifest, schedule: &Schedule) -> Result<Vec<&'a [ImageSample]>> {
    schedule.validate()?;
    if schedule.k() != folds.len() {
        return Err(Error::config(format!(
            "schedule has {} fold phases but {} folds were given",
            schedule.k(),
            folds.len()
        )));
    }
    check_dataset("FULL", full.samples())?;
    let full_ids: HashSet<&str> = full.samples().iter().map(|s| s.id.as_str()).collect();
    let full_reals = full.counts().real;
    let mut seen_fakes = HashSet::new();
    for (i, f) in folds.iter().enumerate() {
        if f.index != i {
            return Err(Error::config(format!("fold at position {i} has index {}", f.index)));
        }
        check_dataset(&format!("fold_{}", i + 1), &f.members)?;
        if f.real_count != full_reals {
            return Err(Error::Consistency(format!(
                "fold_{} does not contain all real samples",
                i + 1
            )));
        }
        for s in &f.members {
            if !full_ids.contains(s.id.as_str()) {
                return Err(Error::Consistency(format!(
                    "fold_{} sample `{}` is not in FULL",
                    i + 1,
                    s.id
                )));
            }
            if s.label == Some(Label::Fake) && !seen_fakes.insert(s.id.as_str()) {
                return Err(Error::Consistency(format!(
                    "fake `{}` appears in more than one fold",
                    s.id
                )));
            }
        }
    }
    Ok(schedule
        .phases
        .iter()
        .map(|p| match p.dataset {
            PhaseDataset::Fold(i) => folds[i].members.as_slice(),
            PhaseDataset::Full => full.samples(),
        })
        .collect())
}

/// Executes the schedule in order, carrying weights across phases.
///
/// With an output directory, each epoch writes a checkpoint, its optimizer
/// state and one log line; `resume` restarts after the last logged epoch and
/// replays the remaining epochs exactly as an uninterrupted run would.
pub fn run_sequential(
    model: &mut dyn Trainable,
    folds: &[Fold],
    full: &Manifest,
    schedule: &Schedule,
    cfg: &TrainConfig,
    options: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let datasets = resolve(folds, full, schedule)?;
    if let Some(v) = &options.validation {
        check_dataset("validation set", v)?;
    }
    let log_path = options.out_dir.as_ref().map(|d| d.join(LOG_FILE));
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run_meta = serde_json::json!({
            "model": model.name(),
            "schedule": schedule,
            "train": cfg,
            "metadata": options.metadata,
        });
        write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&run_meta)?)?;
    }

    let n_params = model.params()?.len();
    let mut optimizer = AdamW::new(n_params);
    let mut done: Vec<EpochRecord> = Vec::new();
    if options.resume {
        let path = log_path
            .as_ref()
            .ok_or_else(|| Error::config("resume requires an output directory"))?;
        done = read_log(path)?;
        if let Some(last) = done.last() {
            let ckpt = last
                .checkpoint
                .clone()
                .ok_or_else(|| Error::State("last logged epoch has no checkpoint".into()))?;
            model.load_weights(&ckpt)?;
            let opt = optimizer_path(&ckpt);
            let bytes = fs::read(&opt).map_err(|e| Error::io(&opt, e))?;
            optimizer = AdamW::from_bytes(&bytes, &opt)?;
            if optimizer.m.len() != n_params {
                return Err(Error::Checkpoint {
                    path: opt,
                    message: "optimizer state does not match the model".into(),
                });
            }
            if weights_digest(model.params()?) != last.weights_sha256 {
                return Err(Error::Checkpoint {
                    path: ckpt,
                    message: "checkpoint weights do not match the training log".into(),
                });
            }
            log::info!("resuming after phase {} epoch {}", last.phase, last.epoch);
        }
    } else if let Some(path) = &log_path {
        if path.exists() {
            fs::remove_file(path).map_err(|e| Error::io(path, e))?;
        }
    }

    let mut records = Vec::new();
    for (phase, data) in schedule.phases.iter().zip(datasets) {
        let mut epochs: Vec<EpochRecord> = done.iter().filter(|r| r.phase == phase.index).cloned().collect();
        if epochs.is_empty() && !cfg.carry_optimizer_state {
            optimizer = AdamW::new(n_params);
        }
        for e in epochs.len() + 1..=phase.epochs {
            let weights_start = weights_digest(model.params()?);
            let steps = train_epoch(model, data, cfg, &mut optimizer, phase.index, e)?;
            let validation = options
                .validation
                .as_deref()
                .map(|v| validate_model(model, v, options.policy))
                .transpose()?;
            let checkpoint = match &options.out_dir {
                Some(dir) => {
                    let path = dir.join(checkpoint_name(model.name(), phase.index, e));
                    let extra = serde_json::json!({
                        "phase": phase.index,
                        "dataset": phase.dataset.to_string(),
                        "epoch": e,
                        "seed": cfg.seed,
                        "run": options.metadata,
                    });
                    model.save(&path, extra)?;
                    write_atomic(&optimizer_path(&path), &optimizer.to_bytes())?;
                    Some(path)
                }
                None => None,
            };
            let record = EpochRecord {
                phase: phase.index,
                dataset: phase.dataset,
                epoch: e,
                train_loss: mean(&steps),
                step_losses: steps,
                validation,
                checkpoint,
                weights_start,
                weights_sha256: weights_digest(model.params()?),
            };
            if let Some(path) = &log_path {
                append_log(path, &record)?;
            }
            log::info!(
                "phase {} ({}) epoch {}: train loss {:.5}",
                phase.index,
                phase.dataset,
                e,
                record.train_loss
            );
            epochs.push(record);
            if options.halt_after == Some((phase.index, e)) {
                records.push(phase_record(phase, epochs));
                return Ok(RunOutcome { records, halted: true });
            }
        }
        records.push(phase_record(phase, epochs));
    }
    Ok(RunOutcome { records, halted: false })
}

fn phase_record(phase: &Phase, epochs: Vec<EpochRecord>) -> PhaseRecord {
    let last = epochs.last().expect("a phase has at least one epoch");
    PhaseRecord {
        phase: phase.index,
        dataset: phase.dataset,
        weights_in: epochs[0].weights_start.clone(),
        weights_out: last.weights_sha256.clone(),
        checkpoint: last.checkpoint.clone(),
        epochs,
    }
}

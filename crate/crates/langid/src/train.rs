//! Training: AdamW-style optimizer, cosine schedule with linear warmup,
//! the fit/fine-tune loops with top-k checkpoint retention, and inference
//! helpers shared with curation and the CLI.

use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, derive_seed, AudioBuffer};
use crate::curate;
use crate::error::{Error, Result};
use crate::frontend::{self, AugmentConfig, NormAxis};
use crate::loss::{self, AamConfig, ClassWeights};
use crate::manifest::Manifest;
use crate::metrics::{self, Trial, TrialScores};
use crate::nn::checkpoint::{self, read_checkpoint};
use crate::nn::params::{init_head_tensors, is_head_tensor, is_running_stat, tensor_specs};
use crate::nn::{
    apply_bn_updates, backward, forward, BackSignal, Batch, HeadKind, Mat, Mode, ModelConfig,
    ParameterSet, Scalar,
};
use crate::par;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment stores plus the step counter.
pub struct AdamState<S> {
    m: ParameterSet<S>,
    v: ParameterSet<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParameterSet<S>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam step with decoupled weight decay:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
/// Batch-norm running statistics are skipped. Non-finite gradients abort
/// with the offending tensor named.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &ParameterSet<S>,
    state: &mut AdamState<S>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let corr1 = S::from_f64(1.0 - ADAM_BETA1.powi(t));
    let corr2 = S::from_f64(1.0 - ADAM_BETA2.powi(t));
    let lr_s = S::from_f64(lr);
    let wd = S::from_f64(weight_decay);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        if is_running_stat(&name) {
            continue;
        }
        let g = grads.get(&name);
        if let Some(idx) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite gradient in {name} at element {idx}"
            )));
        }
        let m = state.m.get_mut(&name);
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = b1 * *mv + (S::one() - b1) * gv;
        }
        let v = state.v.get_mut(&name);
        for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = b2 * *vv + (S::one() - b2) * gv * gv;
        }
        let m = state.m.get(&name);
        let v = state.v.get(&name);
        let p = params.get_mut(&name);
        for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mv / corr1;
            let v_hat = vv / corr2;
            *pv = *pv - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
        }
    }
    Ok(())
}

/// Cosine schedule with linear warmup from zero over the first
/// `warmup_ratio * total_steps` steps, annealing to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).floor() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base_lr;
    }
    let tau = (step - warmup) as f64 / (total_steps - warmup) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * tau.min(1.0)).cos())
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeEqual,
    CeWeighted,
    Aam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    #[default]
    ValLoss,
    MicroAcc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Retained checkpoint with minimum validation EER (two-class only).
    #[default]
    MinValEer,
    /// Fall back to the checkpoint metric (used by the many-class
    /// speaker pretraining task, where EER is undefined).
    CheckpointMetric,
}

fn d_warmup() -> f64 {
    0.1
}
fn d_min_lr() -> f64 {
    1e-7
}
fn d_min_dur() -> f64 {
    0.3
}
fn d_max_dur() -> f64 {
    16.0
}
fn d_top_k() -> usize {
    3
}
fn d_true() -> bool {
    true
}
fn d_aam_scale() -> f64 {
    30.0
}
fn d_aam_margin() -> f64 {
    0.01
}

/// Key = value training configuration (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    #[serde(default = "d_min_dur")]
    pub min_duration: f64,
    #[serde(default = "d_max_dur")]
    pub max_duration: f64,
    pub loss: LossKind,
    #[serde(default)]
    pub checkpoint_metric: CheckpointMetric,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    pub seed: u64,
    #[serde(default = "d_true")]
    pub augment: bool,
    #[serde(default = "d_top_k")]
    pub keep_top_k: usize,
    #[serde(default = "d_aam_scale")]
    pub aam_scale: f64,
    #[serde(default = "d_aam_margin")]
    pub aam_margin: f64,
    /// Stop once validation micro accuracy reaches this value...
    #[serde(default)]
    pub early_stop_acc: Option<f64>,
    /// ...and validation EER drops to this value (both must hold when both
    /// are set).
    #[serde(default)]
    pub early_stop_eer: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        // lr = 0 with min_lr = 0 is the frozen-training mode (nothing moves,
        // batch-norm statistics included); otherwise 0 < min_lr < lr.
        let frozen = self.lr == 0.0 && self.min_lr == 0.0;
        if !frozen && !(self.min_lr > 0.0 && self.min_lr < self.lr) {
            return Err(Error::Config(format!(
                "need 0 < min_lr < lr, got min_lr {} lr {}",
                self.min_lr, self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio outside [0,1)".into()));
        }
        if self.min_duration < 0.0 || self.max_duration < self.min_duration {
            return Err(Error::Config("invalid duration limits".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("negative weight decay".into()));
        }
        if self.keep_top_k == 0 {
            return Err(Error::Config("keep_top_k must be positive".into()));
        }
        AamConfig {
            scale: self.aam_scale,
            margin: self.aam_margin,
        }
        .validate()
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn aam_config(&self) -> AamConfig {
        AamConfig {
            scale: self.aam_scale,
            margin: self.aam_margin,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint records and fit report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub epoch: usize,
    /// Value of the checkpoint metric (lower is better after orientation).
    pub metric: f64,
    pub val_eer: Option<f64>,
    #[serde(skip)]
    pub digest: [u8; 32],
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_micro_acc: f64,
    pub val_eer: Option<f64>,
    pub lr: f64,
}

#[derive(Debug)]
pub struct FitReport {
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_checkpoint: PathBuf,
    pub epochs_run: usize,
    pub history: Vec<EpochMetrics>,
    pub labels: Vec<String>,
}

// ---------------------------------------------------------------------------
// Feature pipeline helpers
// ---------------------------------------------------------------------------

/// Deterministic eval-time features for one utterance.
pub fn eval_features(buf: &AudioBuffer) -> Result<Mat<f32>> {
    let buf = crate::audio::resample(buf, frontend::SAMPLE_RATE)?;
    let logmel = frontend::compute_logmel(&buf)?;
    Ok(frontend::normalize_features(&logmel, NormAxis::PerBin))
}

fn train_features(
    buf: &AudioBuffer,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Mat<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbed = frontend::speed_perturb(buf, augment, &mut rng);
    let logmel = frontend::compute_logmel(&perturbed)?;
    let norm = frontend::normalize_features(&logmel, NormAxis::PerBin);
    Ok(frontend::spec_augment(&norm, augment, &mut rng))
}

/// Stable utterance id for the record at `idx` of a manifest.
pub fn record_id(idx: usize) -> String {
    format!("utt{idx:05}")
}

/// Eval-mode class probabilities for every record of a manifest, in order.
pub fn predict_manifest(
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    manifest: &Manifest,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let feats: Vec<Result<Mat<f32>>> = par::map_range(manifest.len(), |i| {
        let buf = audio::load_record_audio(manifest, &manifest.records[i], frontend::SAMPLE_RATE)?;
        eval_features(&buf)
    });
    let feats = feats.into_iter().collect::<Result<Vec<_>>>()?;
    crate::nn::model::infer_probs(cfg, params, feats, batch_size)
}

fn label_indices(manifest: &Manifest, labels: &[String]) -> Result<Vec<usize>> {
    manifest
        .records
        .iter()
        .map(|r| {
            labels
                .iter()
                .position(|l| *l == r.label)
                .ok_or_else(|| Error::Train(format!("label {} not in training set", r.label)))
        })
        .collect()
}

fn trials_for(manifest: &Manifest, labels: &[String], probs: &[Vec<f64>]) -> Result<TrialScores> {
    let idx = label_indices(manifest, labels)?;
    Ok(TrialScores {
        class_names: labels.to_vec(),
        trials: probs
            .iter()
            .enumerate()
            .map(|(i, p)| Trial {
                id: record_id(i),
                probs: p.clone(),
                label: idx[i],
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn metric_orientation(metric: CheckpointMetric, value: f64) -> f64 {
    // Internally lower-is-better.
    match metric {
        CheckpointMetric::ValLoss => value,
        CheckpointMetric::MicroAcc => -value,
    }
}

struct TopK {
    k: usize,
    records: Vec<CheckpointRecord>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            records: Vec::new(),
        }
    }

    /// Keep if within the best k by oriented metric; returns whether the
    /// candidate was retained. Evicted checkpoint files are deleted.
    fn offer(&mut self, rec: CheckpointRecord) -> Result<bool> {
        self.records.push(rec);
        self.records.sort_by(|a, b| {
            a.metric
                .partial_cmp(&b.metric)
                .unwrap()
                .then(a.epoch.cmp(&b.epoch))
        });
        if self.records.len() > self.k {
            let evicted = self.records.pop().expect("non-empty");
            if evicted.path.exists() {
                std::fs::remove_file(&evicted.path).map_err(|e| Error::io(&evicted.path, e))?;
            }
            return Ok(self.records.iter().all(|r| r.path != evicted.path));
        }
        Ok(true)
    }
}

/// Train the model. When `init` is given (fine-tuning), it is used instead
/// of fresh initialization. Checkpoints, a `final.ckpt` copy of the
/// selected model, and a `metrics.jsonl` log are written under `out_dir`.
pub fn fit(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    out_dir: impl AsRef<Path>,
    init: Option<ParameterSet<f32>>,
) -> Result<FitReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    match (train_cfg.loss, model_cfg.head) {
        (LossKind::Aam, HeadKind::Cosine { .. }) => {}
        (LossKind::Aam, _) => {
            return Err(Error::Config(
                "aam loss requires head = cosine (bias-free prototypes)".into(),
            ))
        }
        (_, HeadKind::Cosine { .. }) => {
            return Err(Error::Config(
                "cross-entropy losses require head = linear".into(),
            ))
        }
        _ => {}
    }

    let train_m = curate::duration_filter(train_manifest, train_cfg.min_duration, train_cfg.max_duration);
    let val_m = curate::duration_filter(val_manifest, train_cfg.min_duration, train_cfg.max_duration);
    if train_m.is_empty() {
        return Err(Error::Train("training manifest empty after duration filtering".into()));
    }
    if val_m.is_empty() {
        return Err(Error::Train("validation manifest empty after duration filtering".into()));
    }

    let labels = train_m.labels();
    if labels.len() != model_cfg.n_classes {
        return Err(Error::Train(format!(
            "manifest has {} classes but model expects {}",
            labels.len(),
            model_cfg.n_classes
        )));
    }
    let train_label_idx = label_indices(&train_m, &labels)?;
    label_indices(&val_m, &labels)?; // validate val labels early

    let weights = match train_cfg.loss {
        LossKind::CeWeighted => loss::compute_class_weights(&train_m, &labels)?,
        _ => ClassWeights::equal(&labels),
    };

    let two_class = labels.len() == 2;
    if matches!(train_cfg.selection_metric, SelectionMetric::MinValEer) && !two_class {
        return Err(Error::Config(
            "min_val_eer selection needs a two-class task; use checkpoint_metric".into(),
        ));
    }

    // Load all audio once; desk-scale corpora fit in memory.
    let train_audio: Vec<AudioBuffer> = par::map_range(train_m.len(), |i| {
        audio::load_record_audio(&train_m, &train_m.records[i], frontend::SAMPLE_RATE)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let val_feats: Vec<Mat<f32>> = par::map_range(val_m.len(), |i| {
        let buf = audio::load_record_audio(&val_m, &val_m.records[i], frontend::SAMPLE_RATE)?;
        eval_features(&buf)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut params = match init {
        Some(p) => p,
        None => crate::nn::init_params::<f32>(model_cfg, train_cfg.seed),
    };
    let mut adam = AdamState::new(&params);
    let augment = if train_cfg.augment {
        AugmentConfig::default()
    } else {
        AugmentConfig::disabled()
    };

    let n = train_m.len();
    let batches_per_epoch = n.div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.epochs * batches_per_epoch;
    let aam_cfg = train_cfg.aam_config();

    use std::io::Write;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut top_k = TopK::new(train_cfg.keep_top_k);
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..train_cfg.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, 0x5u64, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut last_lr = 0.0f64;
        for (bi, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let lr = cosine_lr(step, total_steps, train_cfg.lr, train_cfg.min_lr, train_cfg.warmup_ratio);
            last_lr = lr;
            // Per-item augmentation with derived seeds keeps extraction
            // order-independent and reproducible.
            let feats: Vec<Result<Mat<f32>>> = par::map_collect(chunk, |&idx| {
                let seed = derive_seed(train_cfg.seed, 0xA + epoch as u64, idx as u64);
                train_features(&train_audio[idx], &augment, seed)
            });
            let feats = feats.into_iter().collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_items(feats);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| train_label_idx[i]).collect();
            let dropout_seed = derive_seed(train_cfg.seed, 0xD + epoch as u64, bi as u64);
            let fwd = forward(model_cfg, &params, &batch, Mode::Train { dropout_seed })?;

            let (loss_value, mut grads) = match train_cfg.loss {
                LossKind::CeEqual | LossKind::CeWeighted => {
                    let (l, gl) = loss::weighted_ce(&fwd.logits, &batch_labels, &weights.weights)?;
                    let g = backward(model_cfg, &params, &fwd.acts, BackSignal::Logits(gl));
                    (l.as_f64(), g)
                }
                LossKind::Aam => {
                    let (l, ge, gw) =
                        loss::aam_loss(&fwd.embedding, &batch_labels, params.get("head.weight"), &aam_cfg)?;
                    let g = backward(model_cfg, &params, &fwd.acts, BackSignal::Embedding(ge));
                    (l.as_f64(), {
                        let mut g = g;
                        let dst = g.get_mut("head.weight");
                        for (a, &v) in dst.data_mut().iter_mut().zip(gw.data()) {
                            *a += v;
                        }
                        g
                    })
                }
            };
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss {loss_value} at epoch {epoch} batch {bi}"
                )));
            }
            epoch_loss += loss_value;
            let _ = &mut grads;
            adam_step(&mut params, &grads, &mut adam, lr, train_cfg.weight_decay)?;
            if let Some((name, idx)) = params.find_non_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameter {name}[{idx}] after step {step}"
                )));
            }
            if train_cfg.lr > 0.0 {
                apply_bn_updates(&mut params, &fwd.acts);
            }
            step += 1;
        }
        let train_loss = epoch_loss / batches_per_epoch as f64;

        // Validation pass.
        let val_probs =
            crate::nn::model::infer_probs(model_cfg, &params, val_feats.clone(), train_cfg.batch_size)?;
        let val_trials = trials_for(&val_m, &labels, &val_probs)?;
        let val_micro = metrics::micro_acc(&val_trials)?;
        let val_eer = if two_class {
            Some(metrics::eer(&val_trials, 0)?)
        } else {
            None
        };
        let val_loss = validation_loss(model_cfg, &params, train_cfg, &val_m, &labels, &val_feats, &weights, &aam_cfg)?;

        let em = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_micro_acc: val_micro,
            val_eer,
            lr: last_lr,
        };
        let line = serde_json::to_string(&em).map_err(|e| Error::Train(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        history.push(em);

        // Checkpoint this epoch if it makes the top k.
        let metric_raw = match train_cfg.checkpoint_metric {
            CheckpointMetric::ValLoss => val_loss,
            CheckpointMetric::MicroAcc => val_micro,
        };
        let ckpt_path = out_dir.join(format!("epoch{epoch:04}.ckpt"));
        checkpoint::save_checkpoint(&ckpt_path, model_cfg, &params)?;
        let retained = top_k.offer(CheckpointRecord {
            path: ckpt_path.clone(),
            epoch,
            metric: metric_orientation(train_cfg.checkpoint_metric, metric_raw),
            val_eer,
            digest: model_cfg.digest(),
        })?;
        if !retained && ckpt_path.exists() && top_k.records.iter().all(|r| r.path != ckpt_path) {
            std::fs::remove_file(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
        }

        // Early stop once the configured bars are met.
        let acc_ok = train_cfg.early_stop_acc.map_or(false, |bar| val_micro >= bar);
        let eer_ok = match (train_cfg.early_stop_eer, val_eer) {
            (Some(bar), Some(e)) => e <= bar,
            (Some(_), None) => false,
            (None, _) => true,
        };
        if train_cfg.early_stop_acc.is_some() && acc_ok && eer_ok {
            break;
        }
    }

    // Final model selection among retained checkpoints.
    let chosen = match train_cfg.selection_metric {
        SelectionMetric::MinValEer => top_k
            .records
            .iter()
            .min_by(|a, b| {
                let ea = a.val_eer.unwrap_or(f64::INFINITY);
                let eb = b.val_eer.unwrap_or(f64::INFINITY);
                ea.partial_cmp(&eb).unwrap().then(a.epoch.cmp(&b.epoch))
            })
            .expect("at least one checkpoint"),
        SelectionMetric::CheckpointMetric => top_k
            .records
            .iter()
            .min_by(|a, b| a.metric.partial_cmp(&b.metric).unwrap().then(a.epoch.cmp(&b.epoch)))
            .expect("at least one checkpoint"),
    };
    let final_path = out_dir.join("final.ckpt");
    std::fs::copy(&chosen.path, &final_path).map_err(|e| Error::io(&final_path, e))?;

    Ok(FitReport {
        checkpoints: top_k.records.clone(),
        final_checkpoint: final_path,
        epochs_run,
        history,
        labels,
    })
}

#[allow(clippy::too_many_arguments)]
fn validation_loss(
    model_cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    train_cfg: &TrainConfig,
    val_m: &Manifest,
    labels: &[String],
    val_feats: &[Mat<f32>],
    weights: &ClassWeights,
    aam_cfg: &AamConfig,
) -> Result<f64> {
    let idx = label_indices(val_m, labels)?;
    let mut total = 0.0f64;
    let mut batches = 0usize;
    let mut at = 0usize;
    for chunk in val_feats.chunks(train_cfg.batch_size) {
        let batch = Batch::from_items(chunk.to_vec());
        let fwd = forward(model_cfg, params, &batch, Mode::Eval)?;
        let batch_labels: Vec<usize> = idx[at..at + chunk.len()].to_vec();
        let l = match train_cfg.loss {
            LossKind::CeEqual | LossKind::CeWeighted => {
                loss::weighted_ce(&fwd.logits, &batch_labels, &weights.weights)?.0 as f64
            }
            LossKind::Aam => {
                loss::aam_loss(&fwd.embedding, &batch_labels, params.get("head.weight"), aam_cfg)?
                    .0 as f64
            }
        };
        total += l;
        batches += 1;
        at += chunk.len();
    }
    Ok(total / batches as f64)
}

// ---------------------------------------------------------------------------
// Fine-tuning loads
// ---------------------------------------------------------------------------

/// Load a checkpoint for fine-tuning. With `reinit_head` the stored head
/// may have any class count: all non-head tensors are taken verbatim
/// (shapes must match exactly) and the head is freshly initialized with
/// `head_seed`. Without it, the checkpoint must match `cfg` bit-exactly.
pub fn load_for_finetune(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    reinit_head: bool,
    head_seed: u64,
) -> Result<ParameterSet<f32>> {
    let path = path.as_ref();
    if !reinit_head {
        return checkpoint::load_params(path, cfg);
    }
    let raw = read_checkpoint(path)?;
    let mut params = ParameterSet::new();
    for spec in tensor_specs(cfg) {
        if is_head_tensor(&spec.name) {
            continue; // filled below
        }
        match raw.params.try_get(&spec.name) {
            Some(t) if t.dims() == spec.dims.as_slice() => {
                params.insert(spec.name.clone(), t.clone())
            }
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "non-head shape mismatch: {} stored {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "non-head tensor missing from checkpoint: {}",
                    spec.name
                )))
            }
        }
    }
    for (name, t) in init_head_tensors::<f32>(cfg, head_seed) {
        params.insert(name, t);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Tensor};

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = ModelConfig::tiny();
        let mut params = init_params::<f64>(&cfg, 0);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", Tensor::from_vec(&[4], vec![0.5, -0.25, 1.5, 0.0]));
        let mut grads = params.zeros_like();
        grads
            .get_mut("w")
            .data_mut()
            .copy_from_slice(&[0.3, -0.02, 4.0, 0.9]);
        let before = params.get("w").data().to_vec();
        let mut state = AdamState::new(&params);
        let lr = 1e-3;
        adam_step(&mut params, &grads, &mut state, lr, 0.0).unwrap();
        for (i, (&b, &a)) in before.iter().zip(params.get("w").data()).enumerate() {
            let g: f64 = grads.get("w").data()[i];
            let want = b - lr * g.signum();
            assert!(
                (a - want).abs() <= 1e-6 * lr,
                "elem {i}: {a} vs {want}"
            );
        }
    }

    #[test]
    fn adam_trajectory_matches_reference() {
        // Independent reference implementation of AdamW on a quadratic.
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", Tensor::from_vec(&[3], p.clone()));
        let mut state = AdamState::new(&params);
        let (lr, wd) = (0.01, 0.1);
        let (mut m, mut v) = (vec![0.0f64; 3], vec![0.0f64; 3]);
        for t in 1..=5 {
            // loss = 0.5 * sum(w^2) -> grad = w
            let g_now: Vec<f64> = params.get("w").data().to_vec();
            let mut grads = params.zeros_like();
            grads.get_mut("w").data_mut().copy_from_slice(&g_now);
            adam_step(&mut params, &grads, &mut state, lr, wd).unwrap();
            // reference
            for i in 0..3 {
                let g = p[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= lr * (mh / (vh.sqrt() + 1e-8) + wd * p[i]);
            }
            for i in 0..3 {
                assert!(
                    (p[i] - params.get("w").data()[i]).abs() < 1e-10,
                    "step {t} elem {i}"
                );
            }
        }
    }

    #[test]
    fn cosine_schedule_boundary_values() {
        let (base, min) = (1e-3, 1e-7);
        let total = 1000;
        let warmup = 100;
        assert_eq!(cosine_lr(0, total, base, min, 0.1), 0.0);
        assert!((cosine_lr(warmup, total, base, min, 0.1) - base).abs() < 1e-15);
        let half = warmup + (total - warmup) / 2;
        let want = min + 0.5 * (base - min);
        assert!((cosine_lr(half, total, base, min, 0.1) - want).abs() < 1e-12);
        assert!((cosine_lr(total, total, base, min, 0.1) - min).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_continuous_and_monotone_after_warmup() {
        let (base, min) = (1e-3, 1e-6);
        let total = 500;
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, total, base, min, 0.1);
            if step > 50 {
                assert!(lr <= prev + 1e-15, "lr rose after warmup at step {step}");
            }
            if step >= 50 {
                prev = lr;
            }
        }
        // Continuity at the boundary: one step before warmup end is close
        // to base.
        let before = cosine_lr(49, total, base, min, 0.1);
        assert!((before - base).abs() < base * 0.03);
    }

    #[test]
    fn finetune_reinit_head_preserves_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let spk_cfg = ModelConfig::tiny().with_classes(8);
        let spk_params = init_params::<f32>(&spk_cfg, 11);
        let path = dir.path().join("spk.ckpt");
        checkpoint::save_checkpoint(&path, &spk_cfg, &spk_params).unwrap();

        let lid_cfg = ModelConfig::tiny();
        let loaded = load_for_finetune(&path, &lid_cfg, true, 99).unwrap();
        for (name, t) in loaded.iter() {
            if is_head_tensor(name) {
                assert_eq!(t.dims()[0], 2);
            } else {
                assert_eq!(t, spk_params.get(name), "{name} not preserved");
            }
        }
        // Without reinit the digest mismatch is fatal.
        assert!(load_for_finetune(&path, &lid_cfg, false, 0).is_err());
    }

    #[test]
    fn finetune_strict_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let params = init_params::<f32>(&cfg, 5);
        let path = dir.path().join("m.ckpt");
        checkpoint::save_checkpoint(&path, &cfg, &params).unwrap();
        let loaded = load_for_finetune(&path, &cfg, false, 0).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn train_config_toml_roundtrip_and_validation() {
        let text = r#"
batch_size = 32
lr = 1e-3
weight_decay = 1e-5
epochs = 100
warmup_ratio = 0.1
min_lr = 1e-7
min_duration = 0.3
max_duration = 16.0
loss = "ce_weighted"
checkpoint_metric = "val_loss"
selection_metric = "min_val_eer"
seed = 42
"#;
        let cfg: TrainConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.loss, LossKind::CeWeighted);
        assert_eq!(cfg.keep_top_k, 3);
        let mut bad = cfg.clone();
        bad.min_lr = 2e-3;
        assert!(bad.validate().is_err());
    }
}

//! Joint training: the weighted loss `L^O + λ·L^C`, freeze plans, AdamW
//! steps, checkpointing, resumption and the λ sweep.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{caption_loss, next_token_accuracy, TeacherBatch};
use crate::detect::loss::scalar;
use crate::detect::{DetectionLoss, DetectionLossTerms, DetectionTargets, GroundTruth};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{JointModel, ModelConfig};
use crate::params::Partition;
use crate::scenegen::{SceneRecord, TokenSequence, Vocabulary};
use optim::{AdamW, AdamWConfig};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SWEEP_CSV: &str = "lambda_sweep.csv";

/// λ values of the published sweep.
pub const SWEEP_LAMBDAS: [f64; 5] = [0.01, 0.1, 0.2, 0.5, 10.0];

/// Which partitions receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePlan {
    /// Everything trains.
    #[default]
    None,
    /// Only the caption decoder (φ) trains.
    DecoderOnly,
    /// Backbone (θ) and decoder (φ) train; detection (ψ) is frozen.
    BackboneAndDecoder,
    /// Backbone (θ) and detection (ψ) train; the caption branch is skipped.
    DetectionOnly,
}

impl FreezePlan {
    pub const ALL: [FreezePlan; 4] = [
        FreezePlan::None,
        FreezePlan::DecoderOnly,
        FreezePlan::BackboneAndDecoder,
        FreezePlan::DetectionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePlan::None => "none",
            FreezePlan::DecoderOnly => "decoder_only",
            FreezePlan::BackboneAndDecoder => "backbone_and_decoder",
            FreezePlan::DetectionOnly => "detection_only",
        }
    }

    pub fn trainable(self, part: Partition) -> bool {
        use Partition::*;
        match self {
            FreezePlan::None => true,
            FreezePlan::DecoderOnly => part == Decoder,
            FreezePlan::BackboneAndDecoder => part != Detection,
            FreezePlan::DetectionOnly => part != Decoder,
        }
    }

    pub fn frozen(self) -> Vec<Partition> {
        Partition::ALL.into_iter().filter(|&p| !self.trainable(p)).collect()
    }

    pub fn skips_caption(self) -> bool {
        self == FreezePlan::DetectionOnly
    }
}

impl fmt::Display for FreezePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        FreezePlan::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown freeze plan `{s}` (expected one of none, decoder_only, backbone_and_decoder, detection_only)"
                ))
            })
    }
}

/// Trainable mask over parameter names for a plan.
pub fn apply_freeze_plan(plan: FreezePlan) -> impl Fn(&str) -> bool {
    move |name| Partition::of(name).is_some_and(|p| plan.trainable(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub freeze_plan: FreezePlan,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    /// Train every image on this reference caption; `None` draws one of the
    /// five references per image and step.
    pub caption_index: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl TrainConfig {
    /// λ = 0.1.
    pub fn small() -> Self {
        Self {
            lambda: 0.1,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            batch_size: 2,
            steps: 2000,
            seed: 0,
            freeze_plan: FreezePlan::None,
            checkpoint_every: 500,
            grad_clip: Some(5.0),
            caption_index: None,
        }
    }

    /// λ = 0.2.
    pub fn large() -> Self {
        Self {
            lambda: 0.2,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("λ must be a finite non-negative number, got {}", self.lambda)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be non-negative"));
        }
        if matches!(self.caption_index, Some(i) if i >= crate::scenegen::CAPTIONS_PER_RECORD) {
            return Err(Error::config("caption index must be below 5"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            clip_norm: self.grad_clip,
            ..Default::default()
        }
    }

    /// λ actually applied: the caption branch is dropped under
    /// `detection_only`.
    pub fn effective_lambda(&self) -> f64 {
        if self.freeze_plan.skips_caption() {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Scalar losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    /// Absent when the caption branch is skipped.
    pub caption: Option<f64>,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn detection(&self) -> DetectionLoss {
        DetectionLoss::new(self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg)
    }
}

/// `total = det.total + λ·cap`.
pub fn joint_loss(det: &DetectionLoss, cap: Option<f64>, lambda: f64) -> Result<LossBreakdown> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config(format!("λ must be non-negative, got {lambda}")));
    }
    if matches!(cap, Some(c) if c < 0.0) {
        return Err(Error::config("caption loss must be non-negative"));
    }
    Ok(LossBreakdown {
        rpn_cls: det.rpn_cls,
        rpn_reg: det.rpn_reg,
        roi_cls: det.roi_cls,
        roi_reg: det.roi_reg,
        caption: cap,
        total: det.total + lambda * cap.unwrap_or(0.0),
        lambda,
    })
}

/// One metrics-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Dataset prepared for training: image tensors, boxes and tokenized
/// references.
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub truths: Vec<GroundTruth>,
    pub captions: Vec<Vec<TokenSequence>>,
}

impl TrainingSet {
    pub fn new(records: &[SceneRecord], vocab: &Vocabulary, model: &JointModel) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let max_len = model.config().decoder.max_len;
        let mut set = Self {
            ids: Vec::new(),
            images: Vec::new(),
            truths: Vec::new(),
            captions: Vec::new(),
        };
        for r in records {
            r.validate()?;
            let caps: Vec<TokenSequence> = r.captions.iter().map(|c| vocab.tokenize(c)).collect();
            if let Some(c) = caps.iter().find(|c| c.len() > max_len) {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    reason: format!("caption of {} tokens exceeds max_len {max_len}", c.len()),
                });
            }
            set.ids.push(r.id.clone());
            set.images.push(model.image_batch(&[&r.image])?);
            set.truths.push(GroundTruth {
                boxes: r.boxes.clone(),
                labels: r.labels.clone(),
            });
            set.captions.push(caps);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// A batch of the given item indices with one caption per item.
    pub fn batch(&self, items: &[usize], caption_of: impl Fn(usize) -> usize) -> Result<Batch> {
        let imgs: Vec<&Tensor> = items.iter().map(|&i| &self.images[i]).collect();
        Ok(Batch {
            images: Tensor::cat(&imgs, 0)?,
            truths: items.iter().map(|&i| self.truths[i].clone()).collect(),
            captions: items.iter().map(|&i| self.captions[i][caption_of(i)].clone()).collect(),
        })
    }
}

pub struct Batch {
    pub images: Tensor,
    pub truths: Vec<GroundTruth>,
    pub captions: Vec<TokenSequence>,
}

/// Randomness for one step depends only on `(seed, step)`, so a resumed run
/// draws exactly what an uninterrupted run would.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Items and captions for `step`.
pub fn sample_batch(set: &TrainingSet, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let n = set.len();
    let items: Vec<usize> = if cfg.batch_size >= n {
        (0..n).collect()
    } else {
        let mut v = index::sample(rng, n, cfg.batch_size).into_vec();
        v.sort_unstable();
        v
    };
    let picks: Vec<usize> = match cfg.caption_index {
        Some(c) => vec![c; n],
        None => (0..n).map(|_| rng.random_range(0..crate::scenegen::CAPTIONS_PER_RECORD)).collect(),
    };
    set.batch(&items, |i| picks[i])
}

/// Graph-connected loss terms of one forward pass.
pub struct LossTerms {
    pub detection: DetectionLossTerms,
    pub caption: Option<Tensor>,
    /// Teacher-forced next-token accuracy (caption branch only).
    pub accuracy: Option<f64>,
}

impl LossTerms {
    pub fn total(&self, lambda: f64) -> Result<Tensor> {
        let det = self.detection.total()?;
        Ok(match &self.caption {
            Some(c) => (det + (c * lambda)?)?,
            None => det,
        })
    }
}

/// Forward pass and all loss terms. Detection targets are built from the
/// detached outputs unless `targets` is given (fixed targets make the loss a
/// smooth function of the parameters, e.g. for finite differences).
pub fn loss_terms<R: Rng>(
    model: &JointModel,
    batch: &Batch,
    targets: Option<&DetectionTargets>,
    with_caption: bool,
    rng: &mut R,
) -> Result<(LossTerms, DetectionTargets)> {
    let pyramid = model.encode(&batch.images)?;
    let head = model.detection();
    let fwd = head.forward(&pyramid)?;
    let targets = match targets {
        Some(t) => t.clone(),
        None => head.build_targets(&fwd, &batch.truths, rng)?,
    };
    let detection = head.loss(&fwd, &targets)?;
    let (caption, accuracy) = if with_caption {
        let tb = TeacherBatch::new(&batch.captions, model.config().decoder.max_len)?;
        let memory = model.memory(&pyramid)?;
        let logits = model.decoder().forward(&memory, &tb.input_tensor(model.device())?)?;
        let acc = next_token_accuracy(&logits, &tb.targets)?;
        (Some(caption_loss(&logits, &tb.targets)?), Some(acc))
    } else {
        (None, None)
    };
    Ok((
        LossTerms {
            detection,
            caption,
            accuracy,
        },
        targets,
    ))
}

/// One AdamW update on the plan's trainable parameters. `step` is the
/// 1-based index used in diagnostics.
pub fn train_step(
    model: &JointModel,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let plan = cfg.freeze_plan;
    let (terms, _) = loss_terms(model, batch, None, !plan.skips_caption(), rng)?;
    let mut values = [0.0; 4];
    for (slot, (name, t)) in values.iter_mut().zip(terms.detection.named()) {
        *slot = scalar(t)?;
        if !slot.is_finite() {
            return Err(Error::NonFinite { term: name, step });
        }
    }
    let cap = terms.caption.as_ref().map(scalar).transpose()?;
    if matches!(cap, Some(c) if !c.is_finite()) {
        return Err(Error::NonFinite { term: "caption", step });
    }
    let lambda = cfg.effective_lambda();
    let total = terms.total(lambda)?;
    let total_value = scalar(&total)?;
    if !total_value.is_finite() {
        return Err(Error::NonFinite { term: "total", step });
    }
    let grads = total.backward()?;
    opt.step(model.params(), &grads, apply_freeze_plan(plan))?;
    let [a, b, c, d] = values;
    Ok(LossBreakdown {
        rpn_cls: a,
        rpn_reg: b,
        roi_cls: c,
        roi_reg: d,
        caption: cap,
        total: total_value,
        lambda,
    })
}

pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub checkpoint: PathBuf,
}

fn rewrite_log_prefix(path: &Path, keep_through: usize) -> Result<Vec<StepLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepLog = serde_json::from_str(&line)?;
        if rec.step <= keep_through {
            // keep the original bytes: parsing and re-printing a float is
            // not guaranteed to reproduce it exactly
            text.push_str(&line);
            text.push('\n');
            kept.push(rec);
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(kept)
}

/// Runs steps `start+1 ..= cfg.steps`, appending to `out_dir/metrics.jsonl`
/// and writing `out_dir/checkpoint.bin` every `checkpoint_every` steps and
/// at the end. With `resume`, model and optimizer state come from that
/// checkpoint and the log is truncated to its step.
pub fn train(
    model: &JointModel,
    set: &TrainingSet,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut opt = AdamW::new(cfg.optimizer());
    let log_path = out_dir.join(METRICS_LOG);
    let mut log = match resume {
        Some(ck) => {
            let ck = checkpoint::load(ck)?;
            ck.restore_model(model)?;
            ck.restore_optimizer(&mut opt, model.dtype())?;
            rewrite_log_prefix(&log_path, opt.step)?
        }
        None => {
            fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
            Vec::new()
        }
    };
    let frozen: Vec<&str> = cfg.freeze_plan.frozen().iter().map(|p| p.symbol()).collect();
    log::info!(
        "freeze plan {}: frozen partitions [{}], λ = {}",
        cfg.freeze_plan,
        frozen.join(", "),
        cfg.effective_lambda()
    );
    let mut sink = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let ck_path = out_dir.join(CHECKPOINT);
    let vocab_tokens = vocab.tokens().to_vec();
    for step in opt.step + 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch = sample_batch(set, cfg, &mut rng)?;
        let loss = train_step(model, &mut opt, &batch, cfg, step, &mut rng)?;
        let rec = StepLog { step, loss };
        writeln!(sink, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        log.push(rec);
        if step % 50 == 0 {
            log::info!("step {step}: total {:.4}", loss.total);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            checkpoint::save(&ck_path, model, &opt, cfg, &vocab_tokens)?;
        }
    }
    checkpoint::save(&ck_path, model, &opt, cfg, &vocab_tokens)?;
    Ok(TrainOutcome {
        log,
        checkpoint: ck_path,
    })
}

/// One λ row of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub report: Option<EvalReport>,
    /// Mean `L^O` over the last 10% of steps.
    pub final_detection_loss: Option<f64>,
    pub error: Option<String>,
}

/// Mean detection loss over the trailing tenth of a log (at least one step).
pub fn final_detection_loss(log: &[StepLog]) -> Option<f64> {
    if log.is_empty() {
        return None;
    }
    let k = (log.len() / 10).max(1);
    let tail = &log[log.len() - k..];
    Some(tail.iter().map(|r| r.loss.detection().total).sum::<f64>() / k as f64)
}

/// Fresh training from the same seed for each λ, then evaluation on `val`.
/// Rows for failed λ values carry the error instead of aborting the sweep.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    lambdas: &[f64],
    train_records: &[SceneRecord],
    val_records: &[SceneRecord],
    vocab: &Vocabulary,
    beam: usize,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::config("λ list is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let run = || -> Result<(EvalReport, Option<f64>)> {
            let c = TrainConfig { lambda, ..cfg.clone() };
            let model = JointModel::new(model_cfg, c.seed, candle_core::DType::F32)?;
            let set = TrainingSet::new(train_records, vocab, &model)?;
            let dir = out_dir.join(format!("lambda_{lambda}"));
            let outcome = train(&model, &set, vocab, &c, &dir, None)?;
            let report = metrics::evaluate(&model, val_records, vocab, beam)?;
            Ok((report, final_detection_loss(&outcome.log)))
        };
        let row = match run() {
            Ok((report, fdl)) => SweepRow {
                lambda,
                report: Some(report),
                final_detection_loss: fdl,
                error: None,
            },
            Err(e) => {
                log::warn!("λ = {lambda} failed: {e}");
                SweepRow {
                    lambda,
                    report: None,
                    final_detection_loss: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    write_sweep_csv(&rows, &out_dir.join(SWEEP_CSV))?;
    Ok(rows)
}

pub const SWEEP_COLUMNS: [&str; 10] = ["lambda", "B1", "B2", "B3", "B4", "RougeL", "CIDEr", "mAP", "AP50", "AP75"];

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        let mut rec = vec![r.lambda.to_string()];
        match &r.report {
            Some(rep) => rec.extend(rep.values()[..9].iter().map(|v| format!("{v:.6}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), 9)),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

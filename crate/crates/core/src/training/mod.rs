//! Three-stage optimization, β sweep and gradient verification.

mod gradcheck;

pub use gradcheck::{gradient_check, GradientCheck};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{dice, roc, youden, ConfusionCounts};
use crate::model::{
    kl_term, save_checkpoint, total_loss, Checkpoint, CheckpointHeader, LossBreakdown, LossWeights,
    Model, ModelConfig, Path, Targets,
};
use crate::phantom::NUM_CLASSES;
use crate::nn::Adam;
use crate::phantom::{augment_sequence, LabeledSubject, SegSequence};
use crate::rng;

const INIT_STREAM: u64 = 0x10;
const ORDER_STREAM: u64 = 0x11;
const AUG_STREAM: u64 = 0x12;
const EPS_STREAM: u64 = 0x13;
const EVAL_STREAM: u64 = 0x14;

/// Stream id used for the encoder-only comparison method.
pub const BASELINE_STAGE: u8 = 4;

/// Foreground classes scored by reconstruction Dice.
pub const DICE_CLASSES: [u8; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 15.0,
            max_translation_px: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// epochs of stages 1, 2 and 3; stage 1 includes `pool_epochs`
    pub stage_epochs: [usize; 3],
    /// leading stage-1 epochs spent on the unlabeled pool
    pub pool_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub pool_path: Option<PathBuf>,
    pub cohort_path: Option<PathBuf>,
    /// share of the training portion held out for validation
    pub validation_fraction: f64,
    /// epoch multiplier applied to every stage during a β sweep
    pub sweep_epoch_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 50/50/30 epochs with a 40-epoch pool phase. With the per-pixel mean
    /// reconstruction and a KL summed over D, β=0.2 collapses the posterior
    /// at this scale; β=1e-4 keeps the decoder informative.
    pub fn desk() -> Self {
        Self {
            stage_epochs: [50, 50, 30],
            pool_epochs: 40,
            learning_rate: 1e-3,
            batch_size: 2,
            weights: LossWeights {
                beta: 1e-4,
                ..LossWeights::default()
            },
            augmentation: Augmentation::default(),
            seed: 0,
            pool_path: None,
            cohort_path: None,
            validation_fraction: 0.2,
            sweep_epoch_scale: 0.3,
        }
    }

    /// 500 pool + 300 fine-tune epochs, then 500 and 300.
    pub fn paper() -> Self {
        Self {
            stage_epochs: [800, 500, 300],
            pool_epochs: 500,
            learning_rate: 1e-4,
            batch_size: 8,
            weights: LossWeights::default(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.pool_epochs > self.stage_epochs[0] {
            return Err(Error::config("train.pool_epochs", "exceeds the stage-1 epoch count"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("train.validation_fraction", "must lie in [0, 1)"));
        }
        if !(self.sweep_epoch_scale > 0.0 && self.sweep_epoch_scale <= 1.0) {
            return Err(Error::config("train.sweep_epoch_scale", "must lie in (0, 1]"));
        }
        let a = &self.augmentation;
        if !(a.max_rotation_deg >= 0.0 && a.max_translation_px >= 0.0) {
            return Err(Error::config("train.augmentation", "bounds must be >= 0"));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON of the training and model settings.
    pub fn hash(&self, model: &ModelConfig) -> String {
        let v = serde_json::json!({ "train": self, "model": model });
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Training inputs: optional unlabeled pool, labeled training subjects and a
/// labeled validation split.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub pool: Vec<SegSequence>,
    pub train: Vec<LabeledSubject>,
    pub validation: Vec<LabeledSubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub phase: String,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_dice: Option<f64>,
    pub val_primary_bacc: Option<f64>,
    pub val_concept_bacc: Vec<f64>,
    pub wall_clock_s: f64,
}

pub type TrainHistory = Vec<EpochRecord>;

/// Loss weights and network path of each stage.
pub fn stage_objective(stage: u8, weights: &LossWeights) -> Result<(LossWeights, Path)> {
    match stage {
        1 => Ok((weights.vae_only(), Path::Full)),
        2 => Ok((
            LossWeights {
                alpha: vec![0.0; weights.alpha.len()],
                ..weights.clone()
            },
            Path::Full,
        )),
        3 => Ok((weights.clone(), Path::Full)),
        BASELINE_STAGE => Ok((
            LossWeights {
                beta: 0.0,
                gamma: weights.gamma,
                alpha: vec![0.0; weights.alpha.len()],
            },
            Path::EncoderOnly,
        )),
        s => Err(Error::invalid(format!("unknown stage {s}"))),
    }
}

enum Items<'a> {
    Pool(&'a [SegSequence]),
    Labeled(&'a [LabeledSubject]),
}

impl Items<'_> {
    fn len(&self) -> usize {
        match self {
            Items::Pool(p) => p.len(),
            Items::Labeled(l) => l.len(),
        }
    }

    fn sequence(&self, i: usize) -> &SegSequence {
        match self {
            Items::Pool(p) => &p[i],
            Items::Labeled(l) => &l[i].sequence,
        }
    }
}

struct Phase<'a> {
    stage: u8,
    id: u64,
    name: &'static str,
    items: Items<'a>,
    epochs: usize,
}

fn gaussian(n: usize, seed: u64, path: &[u64]) -> Vec<f64> {
    let mut r = rng::stream(seed, path);
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn labels_of(subjects: &[&LabeledSubject], k: usize) -> Result<(Vec<u8>, Vec<Vec<u8>>)> {
    if let Some(s) = subjects.iter().find(|s| s.y_k.len() < k) {
        return Err(Error::config(
            "data",
            format!("subject {} carries {} concept labels, model needs {k}", s.seed, s.y_k.len()),
        ));
    }
    Ok((
        subjects.iter().map(|s| s.y).collect(),
        subjects.iter().map(|s| s.y_k.clone()).collect(),
    ))
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    model: &mut Model,
    phase: &Phase<'_>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    path: Path,
    adam: &mut Adam<f32>,
    validation: &[LabeledSubject],
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainHistory> {
    let n = phase.items.len();
    let mut history = Vec::with_capacity(phase.epochs);
    if n == 0 || phase.epochs == 0 {
        return Ok(history);
    }
    let (t, d) = (model.config.frames, model.config.latent_dim);
    let kcount = model.config.concepts.len();
    let seed = cfg.seed;
    let aug = &cfg.augmentation;
    for epoch in 0..phase.epochs {
        let start = Instant::now();
        let key = [phase.stage as u64, phase.id, epoch as u64];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &[ORDER_STREAM, key[0], key[1], key[2]]));
        let mut sum = LossBreakdown {
            concepts: vec![0.0; kcount],
            ..Default::default()
        };
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bkey = [key[0], key[1], key[2], bi as u64];
            let seqs: Vec<SegSequence> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let s = phase.items.sequence(i);
                    if aug.enabled {
                        let aseed = rng::derive_seed(seed, &[AUG_STREAM, bkey[0], bkey[1], bkey[2], bkey[3], j as u64]);
                        augment_sequence(s, aug.max_rotation_deg, aug.max_translation_px, aseed)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SegSequence> = seqs.iter().collect();
            let eps = match path {
                Path::Full => Some(gaussian(
                    chunk.len() * t * d,
                    seed,
                    &[EPS_STREAM, bkey[0], bkey[1], bkey[2], bkey[3]],
                )),
                Path::EncoderOnly => None,
            };
            let labeled = match &phase.items {
                Items::Labeled(l) => Some(labels_of(&chunk.iter().map(|&i| &l[i]).collect::<Vec<_>>(), kcount)?),
                Items::Pool(_) => None,
            };
            let targets = labeled.as_ref().map(|(y, yk)| Targets { y, y_k: yk });
            let loss = model.loss_and_grad(&refs, targets, eps.as_deref(), weights, path)?;
            if !loss.total.is_finite() {
                return Err(Error::degenerate(format!(
                    "non-finite loss in stage {} epoch {epoch}",
                    phase.stage
                )));
            }
            adam.step(model);
            let w = chunk.len() as f64;
            sum.total += loss.total * w;
            sum.recon += loss.recon * w;
            sum.kl += loss.kl * w;
            sum.primary += loss.primary * w;
            for (a, c) in sum.concepts.iter_mut().zip(&loss.concepts) {
                *a += c * w;
            }
            seen += chunk.len();
        }
        let nf = seen as f64;
        sum.total /= nf;
        sum.recon /= nf;
        sum.kl /= nf;
        sum.primary /= nf;
        sum.concepts.iter_mut().for_each(|c| *c /= nf);

        let val = if validation.is_empty() {
            None
        } else {
            Some(validation_summary(model, validation, path)?)
        };
        let rec = EpochRecord {
            stage: phase.stage,
            phase: phase.name.to_string(),
            epoch,
            loss: sum,
            val_dice: val.as_ref().and_then(|v| v.dice),
            val_primary_bacc: val.as_ref().map(|v| v.primary_bacc),
            val_concept_bacc: val.map(|v| v.concept_bacc).unwrap_or_default(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "stage {} {} epoch {epoch}: loss {:.4} recon {:.4} kl {:.3} dice {:?}",
            rec.stage,
            rec.phase,
            rec.loss.total,
            rec.loss.recon,
            rec.loss.kl,
            rec.val_dice
        );
        log(&rec)?;
        history.push(rec);
    }
    Ok(history)
}

/// Trains one stage in place. Stage 1 runs `pool_epochs` on the pool (when
/// one is given) and the remaining epochs on the training subjects.
pub fn train_stage(
    model: &mut Model,
    data: &TrainData,
    stage: u8,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let (weights, path) = stage_objective(stage, &cfg.weights)?;
    if stage != 1 && data.train.is_empty() {
        return Err(Error::config("data", format!("stage {stage} needs labeled training subjects")));
    }
    let mut phases = Vec::new();
    match stage {
        1 => {
            let pool_epochs = if data.pool.is_empty() { 0 } else { cfg.pool_epochs };
            phases.push(Phase {
                stage,
                id: 0,
                name: "pool",
                items: Items::Pool(&data.pool),
                epochs: pool_epochs,
            });
            phases.push(Phase {
                stage,
                id: 1,
                name: "cohort",
                items: Items::Labeled(&data.train),
                epochs: cfg.stage_epochs[0] - cfg.pool_epochs,
            });
        }
        2 | 3 => phases.push(Phase {
            stage,
            id: 0,
            name: "cohort",
            items: Items::Labeled(&data.train),
            epochs: cfg.stage_epochs[stage as usize - 1],
        }),
        _ => phases.push(Phase {
            stage,
            id: 0,
            name: "baseline",
            items: Items::Labeled(&data.train),
            epochs: cfg.stage_epochs[1] + cfg.stage_epochs[2],
        }),
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();
    for ph in &phases {
        history.extend(run_phase(model, ph, cfg, &weights, path, &mut adam, &data.validation, log)?);
    }
    Ok(history)
}

/// Encoder plus primary head trained on the classification loss alone for
/// as many epochs as stages 2 and 3 together.
pub fn train_baseline(
    model_cfg: &ModelConfig,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<(Model, TrainHistory)> {
    let mut model = init_model(model_cfg, cfg.seed, data)?;
    let h = train_stage(&mut model, data, BASELINE_STAGE, cfg, log)?;
    Ok((model, h))
}

/// Initial weights; the decoder output bias starts at the class prior of
/// the training sequences.
pub fn init_model(model_cfg: &ModelConfig, seed: u64, data: &TrainData) -> Result<Model> {
    let mut m = Model::new(model_cfg.clone(), rng::derive_seed(seed, &[INIT_STREAM]))?;
    let seqs = data.pool.iter().chain(data.train.iter().map(|s| &s.sequence));
    m.set_output_prior(&class_frequencies(seqs));
    Ok(m)
}

/// Pixel share of each class over all frames; uniform when empty.
pub fn class_frequencies<'a>(seqs: impl Iterator<Item = &'a SegSequence>) -> [f64; NUM_CLASSES] {
    let mut counts = [0u64; NUM_CLASSES];
    for s in seqs {
        for f in &s.frames {
            for &l in &f.labels {
                counts[(l as usize).min(NUM_CLASSES - 1)] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return [1.0 / NUM_CLASSES as f64; NUM_CLASSES];
    }
    counts.map(|c| c as f64 / total as f64)
}

#[derive(Debug, Clone)]
pub struct ValidationSummary {
    pub dice: Option<f64>,
    pub primary_bacc: f64,
    pub concept_bacc: Vec<f64>,
}

/// Latent-mean forward pass over subjects in small chunks.
pub fn predict(model: &Model, subjects: &[LabeledSubject], path: Path) -> Result<Predictions> {
    let mut out = Predictions::default();
    for chunk in subjects.chunks(8) {
        let seqs: Vec<&SegSequence> = chunk.iter().map(|s| &s.sequence).collect();
        let b = model.forward(&seqs, None, path)?;
        out.y_hat.extend_from_slice(&b.y_hat);
        out.y_k_hat.extend(b.y_k_hat.iter().cloned());
        if b.recon.is_some() {
            for (i, s) in chunk.iter().enumerate() {
                let mut acc = 0.0;
                for t in 0..b.frames {
                    if let Some(rec) = b.recon_labels(i, t) {
                        acc += dice(&s.sequence.frames[t], &rec, &DICE_CLASSES)?;
                    }
                }
                out.dice.push(acc / b.frames as f64);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub y_hat: Vec<f64>,
    pub y_k_hat: Vec<Vec<f64>>,
    /// mean Dice of each subject, empty on the encoder-only path
    pub dice: Vec<f64>,
}

impl Predictions {
    pub fn mean_dice(&self) -> Option<f64> {
        (!self.dice.is_empty()).then(|| self.dice.iter().sum::<f64>() / self.dice.len() as f64)
    }

    pub fn concept_scores(&self, k: usize) -> Vec<f64> {
        self.y_k_hat.iter().map(|v| v[k]).collect()
    }
}

fn validation_summary(model: &Model, val: &[LabeledSubject], path: Path) -> Result<ValidationSummary> {
    let p = predict(model, val, path)?;
    let y: Vec<u8> = val.iter().map(|s| s.y).collect();
    let bacc = |labels: &[u8], scores: &[f64]| {
        ConfusionCounts::at_threshold(labels, scores, 0.5).map(|c| c.bacc())
    };
    let concept_bacc = (0..model.config.concepts.len())
        .map(|k| {
            let yk: Vec<u8> = val.iter().map(|s| s.y_k.get(k).copied().unwrap_or(0)).collect();
            bacc(&yk, &p.concept_scores(k))
        })
        .collect::<Result<_>>()?;
    Ok(ValidationSummary {
        dice: p.mean_dice(),
        primary_bacc: bacc(&y, &p.y_hat)?,
        concept_bacc,
    })
}

/// Batch loss over `subjects` without augmentation, with a fixed noise draw.
pub fn evaluate_loss(
    model: &Model,
    subjects: &[LabeledSubject],
    weights: &LossWeights,
    path: Path,
    seed: u64,
) -> Result<LossBreakdown> {
    let kcount = model.config.concepts.len();
    let (t, d) = (model.config.frames, model.config.latent_dim);
    let mut sum = LossBreakdown {
        concepts: vec![0.0; kcount],
        ..Default::default()
    };
    for (ci, chunk) in subjects.chunks(8).enumerate() {
        let seqs: Vec<&SegSequence> = chunk.iter().map(|s| &s.sequence).collect();
        let eps = gaussian(chunk.len() * t * d, seed, &[EVAL_STREAM, ci as u64]);
        let out = model.forward(&seqs, Some(&eps), path)?;
        let (y, yk) = labels_of(&chunk.iter().collect::<Vec<_>>(), kcount)?;
        let l = total_loss(&out, &seqs, Some(Targets { y: &y, y_k: &yk }), weights)?;
        let w = chunk.len() as f64;
        sum.total += l.total * w;
        sum.recon += l.recon * w;
        sum.kl += l.kl * w;
        sum.primary += l.primary * w;
        for (a, c) in sum.concepts.iter_mut().zip(&l.concepts) {
            *a += c * w;
        }
    }
    let nf = subjects.len().max(1) as f64;
    sum.total /= nf;
    sum.recon /= nf;
    sum.kl /= nf;
    sum.primary /= nf;
    sum.concepts.iter_mut().for_each(|c| *c /= nf);
    Ok(sum)
}

/// Models after each completed stage of a schedule.
#[derive(Debug, Clone)]
pub struct ScheduleResult {
    pub checkpoints: Vec<Checkpoint>,
    pub paths: Vec<PathBuf>,
    pub history: TrainHistory,
}

impl ScheduleResult {
    pub fn final_model(&self) -> Option<&Model> {
        self.checkpoints.last().map(|c| &c.model)
    }

    pub fn stage(&self, stage: u8) -> Option<&Model> {
        self.checkpoints
            .iter()
            .find(|c| c.header.stage == stage)
            .map(|c| &c.model)
    }
}

pub fn checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

fn make_checkpoint(model: &Model, cfg: &TrainConfig, stage: u8) -> Result<Checkpoint> {
    Ok(Checkpoint {
        header: CheckpointHeader {
            model: model.config.clone(),
            weights: cfg.weights.clone(),
            config_hash: cfg.hash(&model.config),
            train: serde_json::to_value(cfg)?,
            seed: cfg.seed,
            stage,
        },
        model: model.clone(),
    })
}

/// Runs stages 1 to 3 (or the stages after `resume`), checkpointing after
/// each one into `ckpt_dir` and appending epoch records to `history_path`.
pub fn run_schedule(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    ckpt_dir: Option<&FsPath>,
    history_path: Option<&FsPath>,
    resume: Option<Checkpoint>,
) -> Result<ScheduleResult> {
    run_stages(cfg, model_cfg, data, ckpt_dir, history_path, resume, 3)
}

/// As [`run_schedule`], stopping after stage `last`.
pub fn run_stages(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    ckpt_dir: Option<&FsPath>,
    history_path: Option<&FsPath>,
    resume: Option<Checkpoint>,
    last: u8,
) -> Result<ScheduleResult> {
    cfg.validate()?;
    model_cfg.validate()?;
    if cfg.weights.alpha.len() != model_cfg.concepts.len() {
        return Err(Error::config(
            "train.weights.alpha",
            format!("{} weights for {} concepts", cfg.weights.alpha.len(), model_cfg.concepts.len()),
        ));
    }
    let (mut model, done) = match resume {
        Some(ck) => {
            if ck.header.model != *model_cfg {
                return Err(Error::config("resume", "checkpoint model configuration differs"));
            }
            if ck.header.config_hash != cfg.hash(model_cfg) {
                return Err(Error::config("resume", "checkpoint was written under a different training configuration"));
            }
            (ck.model, ck.header.stage)
        }
        None => (init_model(model_cfg, cfg.seed, data)?, 0),
    };
    let mut out = ScheduleResult {
        checkpoints: Vec::new(),
        paths: Vec::new(),
        history: Vec::new(),
    };
    let mut sink = history_path
        .map(|p| OpenOptions::new().create(true).append(true).open(p))
        .transpose()?;
    let mut log = |r: &EpochRecord| -> Result<()> {
        if let Some(f) = sink.as_mut() {
            serde_json::to_writer(&mut *f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    };
    for stage in (done + 1)..=last {
        let h = train_stage(&mut model, data, stage, cfg, &mut log)?;
        out.history.extend(h);
        let ck = make_checkpoint(&model, cfg, stage)?;
        if let Some(dir) = ckpt_dir {
            let p = dir.join(checkpoint_name(stage));
            save_checkpoint(&ck, &p)?;
            out.paths.push(p);
        }
        out.checkpoints.push(ck);
    }
    Ok(out)
}

/// Initial weights wrapped as a stage-0 checkpoint.
pub fn initial_checkpoint(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &TrainData) -> Result<Checkpoint> {
    make_checkpoint(&init_model(model_cfg, cfg.seed, data)?, cfg, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub dice: f64,
    pub kl_per_dim: f64,
    pub concept_bacc: Vec<f64>,
    pub primary_bacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub recommended_beta: f64,
    pub epochs: [usize; 3],
}

/// Largest β whose Dice is within 0.02 of the best Dice in the sweep.
pub fn recommend_beta(rows: &[SweepRow]) -> Result<f64> {
    let best = rows
        .iter()
        .map(|r| r.dice)
        .fold(f64::NEG_INFINITY, f64::max);
    rows.iter()
        .filter(|r| r.dice >= best - 0.02)
        .map(|r| r.beta)
        .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.max(b))))
        .ok_or_else(|| Error::invalid("empty sweep"))
}

/// Runs the schedule at reduced epochs for every β and scores each run on
/// the validation split (Youden BACC for the classifiers).
pub fn beta_sweep(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    betas: &[f64],
) -> Result<SweepReport> {
    if betas.is_empty() {
        return Err(Error::invalid("beta list is empty"));
    }
    if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::invalid(format!("beta {b} is not a finite nonnegative number")));
    }
    if data.validation.is_empty() {
        return Err(Error::config("data", "the sweep scores on the validation split, which is empty"));
    }
    let scale = |e: usize| ((e as f64 * cfg.sweep_epoch_scale).round() as usize).max(1);
    let epochs = cfg.stage_epochs.map(scale);
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut c = cfg.clone();
        c.weights.beta = beta;
        c.stage_epochs = epochs;
        c.pool_epochs = ((cfg.pool_epochs as f64 * cfg.sweep_epoch_scale).round() as usize).min(epochs[0]);
        let res = run_schedule(&c, model_cfg, data, None, None, None)?;
        let model = res.final_model().ok_or_else(|| Error::invalid("schedule produced no model"))?;
        let p = predict(model, &data.validation, Path::Full)?;
        let youden_bacc = |labels: &[u8], scores: &[f64]| -> Result<f64> {
            match roc(labels, scores) {
                Ok(curve) => Ok(youden(&curve)?.bacc),
                Err(Error::Degenerate(_)) => Ok(f64::NAN),
                Err(e) => Err(e),
            }
        };
        let y: Vec<u8> = data.validation.iter().map(|s| s.y).collect();
        let concept_bacc = (0..model_cfg.concepts.len())
            .map(|k| {
                let yk: Vec<u8> = data.validation.iter().map(|s| s.y_k[k]).collect();
                youden_bacc(&yk, &p.concept_scores(k))
            })
            .collect::<Result<_>>()?;
        let mut kl = 0.0;
        let mut frames = 0usize;
        for s in &data.validation {
            let code = model.encode_sequence(&s.sequence)?;
            for (m, l) in code.mu.iter().zip(&code.log_sigma) {
                kl += kl_term(m, l);
                frames += 1;
            }
        }
        rows.push(SweepRow {
            beta,
            dice: p.mean_dice().unwrap_or(0.0),
            kl_per_dim: kl / (frames * model_cfg.latent_dim) as f64,
            concept_bacc,
            primary_bacc: youden_bacc(&y, &p.y_hat)?,
        });
    }
    let recommended_beta = recommend_beta(&rows)?;
    Ok(SweepReport {
        rows,
        recommended_beta,
        epochs,
    })
}

#[cfg(test)]
mod tests;

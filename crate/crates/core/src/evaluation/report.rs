//! Method comparison over held-out subjects: baseline, VAE + primary
//! classifier, VAE + primary + concept classifiers.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::metrics::{mcnemar, roc, stratified_kfold, stratified_split, youden, ConfusionCounts, OperatingPoint};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, Model, ModelConfig, Path};
use crate::phantom::{LabeledSubject, SegSequence};
use crate::training::{
    predict, run_stages, train_baseline, Predictions, TrainConfig, TrainData,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// encoder + primary head, classification loss only
    Baseline,
    /// stage-2 model: VAE + primary classifier
    VaePrimary,
    /// stage-3 model: VAE + primary + concept classifiers
    VaePrimaryConcept,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::VaePrimary, Method::VaePrimaryConcept];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::VaePrimary => "vae_primary",
            Method::VaePrimaryConcept => "vae_primary_concept",
        }
    }

    fn path(self) -> Path {
        match self {
            Method::Baseline => Path::EncoderOnly,
            _ => Path::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    Holdout { test_fraction: f64 },
    CrossValidation { folds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub methods: Vec<Method>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            protocol: Protocol::Holdout { test_fraction: 0.2 },
            methods: Method::ALL.to_vec(),
        }
    }
}

impl EvalSettings {
    pub fn cross_validation(folds: usize) -> Self {
        Self {
            protocol: Protocol::CrossValidation { folds },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.protocol {
            Protocol::Holdout { test_fraction } if !(test_fraction > 0.0 && test_fraction < 1.0) => {
                return Err(Error::config("eval.protocol.test_fraction", "must lie in (0, 1)"));
            }
            Protocol::CrossValidation { folds } if folds < 2 => {
                return Err(Error::config("eval.protocol.folds", "need at least 2 folds"));
            }
            _ => {}
        }
        if self.methods.is_empty() {
            return Err(Error::config("eval.methods", "no methods selected"));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(Error::config("eval.methods", "duplicate method"));
        }
        Ok(())
    }
}

/// Rates in percent, rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub bacc: f64,
    pub sen: f64,
    pub spe: f64,
}

fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

impl Rates {
    fn of(sen: f64, spe: f64) -> Self {
        Self {
            bacc: pct((sen + spe) / 2.0),
            sen: pct(sen),
            spe: pct(spe),
        }
    }
}

/// ROC sentinels are infinite; JSON has no infinities, so they are written
/// as the strings `"-inf"` and `"inf"`.
mod threshold {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Finite(f64),
        Named(String),
    }

    pub(super) fn to_repr(x: f64) -> Repr {
        match x {
            f64::INFINITY => Repr::Named("inf".into()),
            f64::NEG_INFINITY => Repr::Named("-inf".into()),
            _ => Repr::Finite(x),
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Finite(x) => Ok(x),
            Repr::Named(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Named(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Named(s) => Err(E::custom(format!("bad threshold '{s}'"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d).map_err(D::Error::custom)?)
    }
}

mod threshold_list {
    use super::threshold::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        xs.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }
}

/// Predictions binarized at the threshold chosen on each fold's validation
/// split and applied frozen to its test subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSelected {
    #[serde(flatten)]
    pub rates: Rates,
    /// one threshold per fold
    #[serde(with = "threshold_list")]
    pub thresholds: Vec<f64>,
    pub mcnemar_p_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    #[serde(flatten)]
    pub rates: Rates,
    #[serde(with = "threshold")]
    pub threshold: f64,
    pub validation_selected: ValidationSelected,
}

/// One row of the comparison table. The top-level rates come from the
/// Youden point of the ROC over pooled test predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    #[serde(flatten)]
    pub rates: Rates,
    #[serde(with = "threshold")]
    pub threshold: f64,
    /// mean test Dice over classes 1-3 in percent; absent without a decoder
    pub dice: Option<f64>,
    pub mcnemar_p_vs_baseline: Option<f64>,
    pub validation_selected: ValidationSelected,
    pub concept: Option<BTreeMap<String, ConceptMetrics>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub n_subjects: usize,
    pub methods: Vec<MethodRow>,
}

impl MetricsReport {
    pub fn row(&self, m: Method) -> Option<&MethodRow> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Subject indices of one train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub fit: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn strata(subjects: &[&LabeledSubject]) -> Vec<u32> {
    subjects
        .iter()
        .map(|s| 2 * s.y as u32 + s.y_k.first().copied().unwrap_or(0) as u32)
        .collect()
}

/// Partitions of the cohort under `protocol`. Test sets are stratified on
/// the primary label; the validation split inside each training portion on
/// (primary, first concept).
pub fn splits(cohort: &[LabeledSubject], protocol: Protocol, validation_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    let all: Vec<&LabeledSubject> = cohort.iter().collect();
    let tests: Vec<(Vec<usize>, Vec<usize>)> = match protocol {
        Protocol::Holdout { test_fraction } => {
            let y: Vec<u32> = cohort.iter().map(|s| s.y as u32).collect();
            vec![stratified_split(&y, test_fraction, seed)?]
        }
        Protocol::CrossValidation { folds } => {
            let y: Vec<u8> = cohort.iter().map(|s| s.y).collect();
            let a = stratified_kfold(&y, folds, seed)?;
            (0..folds).map(|f| (a.train_indices(f), a.test_indices(f))).collect()
        }
    };
    tests
        .into_iter()
        .enumerate()
        .map(|(f, (train, test))| {
            let sub: Vec<&LabeledSubject> = train.iter().map(|&i| all[i]).collect();
            let (fit, val) = stratified_split(&strata(&sub), validation_fraction, seed ^ (f as u64 + 1))?;
            Ok(Split {
                fit: fit.iter().map(|&i| train[i]).collect(),
                validation: val.iter().map(|&i| train[i]).collect(),
                test,
            })
        })
        .collect()
}

pub fn train_data(cohort: &[LabeledSubject], pool: &[SegSequence], split: &Split) -> TrainData {
    TrainData {
        pool: pool.to_vec(),
        train: split.fit.iter().map(|&i| cohort[i].clone()).collect(),
        validation: split.validation.iter().map(|&i| cohort[i].clone()).collect(),
    }
}

/// Trained models of one split.
#[derive(Debug, Clone, Default)]
pub struct FoldModels {
    pub baseline: Option<Model>,
    /// checkpoints after stages 1-3 (stage 2 = vae_primary, stage 3 = full)
    pub stages: Vec<Checkpoint>,
}

impl FoldModels {
    pub fn model(&self, m: Method) -> Option<&Model> {
        match m {
            Method::Baseline => self.baseline.as_ref(),
            Method::VaePrimary => self.stages.iter().find(|c| c.header.stage == 2).map(|c| &c.model),
            Method::VaePrimaryConcept => self.stages.iter().find(|c| c.header.stage == 3).map(|c| &c.model),
        }
    }
}

/// Trains every requested method on one split. Checkpoints go to
/// `ckpt_dir` when given.
pub fn train_methods(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    methods: &[Method],
    ckpt_dir: Option<&FsPath>,
) -> Result<FoldModels> {
    let mut out = FoldModels::default();
    if methods.contains(&Method::Baseline) {
        let (m, _) = train_baseline(model_cfg, data, cfg, &mut |_| Ok(()))?;
        if let Some(dir) = ckpt_dir {
            let ck = Checkpoint {
                header: crate::model::CheckpointHeader {
                    model: model_cfg.clone(),
                    weights: cfg.weights.clone(),
                    config_hash: cfg.hash(model_cfg),
                    train: serde_json::to_value(cfg)?,
                    seed: cfg.seed,
                    stage: crate::training::BASELINE_STAGE,
                },
                model: m.clone(),
            };
            save_checkpoint(&ck, &dir.join("baseline.ckpt"))?;
        }
        out.baseline = Some(m);
    }
    let last = if methods.contains(&Method::VaePrimaryConcept) {
        3
    } else if methods.contains(&Method::VaePrimary) {
        2
    } else {
        0
    };
    if last > 0 {
        out.stages = run_stages(cfg, model_cfg, data, ckpt_dir, None, None, last)?.checkpoints;
    }
    Ok(out)
}

/// Threshold at the Youden point of `scores` on the validation split; 0.5
/// when the split holds a single class.
fn select_threshold(labels: &[u8], scores: &[f64]) -> Result<f64> {
    match roc(labels, scores) {
        Ok(c) => Ok(youden(&c)?.threshold),
        Err(Error::Degenerate(_)) => Ok(0.5),
        Err(e) => Err(e),
    }
}

/// Scores of one classifier collected across folds.
#[derive(Debug, Clone, Default)]
struct Pooled {
    labels: Vec<u8>,
    scores: Vec<f64>,
    /// validation-selected binary predictions
    preds: Vec<u8>,
    thresholds: Vec<f64>,
}

impl Pooled {
    fn add(&mut self, val_labels: &[u8], val_scores: &[f64], labels: &[u8], scores: &[f64]) -> Result<()> {
        let thr = select_threshold(val_labels, val_scores)?;
        self.thresholds.push(thr);
        self.labels.extend_from_slice(labels);
        self.scores.extend_from_slice(scores);
        self.preds.extend(scores.iter().map(|&s| u8::from(s >= thr)));
        Ok(())
    }

    fn youden(&self) -> Result<OperatingPoint> {
        youden(&roc(&self.labels, &self.scores)?)
    }

    fn youden_preds(&self, thr: f64) -> Vec<u8> {
        self.scores.iter().map(|&s| u8::from(s >= thr)).collect()
    }

    fn selected(&self) -> Result<Rates> {
        let c = ConfusionCounts::from_predictions(&self.labels, &self.preds)?;
        Ok(Rates::of(c.sen(), c.spe()))
    }
}

#[derive(Debug, Default)]
struct MethodAcc {
    primary: Pooled,
    concepts: Vec<Pooled>,
    dice: Vec<f64>,
}

fn concept_labels(subjects: &[&LabeledSubject], k: usize) -> Result<Vec<u8>> {
    subjects
        .iter()
        .map(|s| {
            s.y_k
                .get(k)
                .copied()
                .ok_or_else(|| Error::config("data", format!("subject {} lacks concept label {k}", s.seed)))
        })
        .collect()
}

/// Accumulates one trained split into the per-method pools.
struct Comparison {
    methods: Vec<Method>,
    acc: BTreeMap<Method, MethodAcc>,
    concept_names: Vec<String>,
}

impl Comparison {
    fn new(methods: &[Method], model_cfg: &ModelConfig) -> Self {
        Self {
            methods: methods.to_vec(),
            acc: methods.iter().map(|&m| (m, MethodAcc::default())).collect(),
            concept_names: model_cfg.concepts.iter().map(|c| c.name.clone()).collect(),
        }
    }

    fn add(&mut self, cohort: &[LabeledSubject], split: &Split, models: &FoldModels) -> Result<()> {
        let val: Vec<LabeledSubject> = split.validation.iter().map(|&i| cohort[i].clone()).collect();
        let test: Vec<LabeledSubject> = split.test.iter().map(|&i| cohort[i].clone()).collect();
        let val_refs: Vec<&LabeledSubject> = val.iter().collect();
        let test_refs: Vec<&LabeledSubject> = test.iter().collect();
        let yv: Vec<u8> = val.iter().map(|s| s.y).collect();
        let yt: Vec<u8> = test.iter().map(|s| s.y).collect();
        for &m in &self.methods {
            let model = models
                .model(m)
                .ok_or_else(|| Error::Dependency(format!("no trained model for method {}", m.name())))?;
            let pv: Predictions = predict(model, &val, m.path())?;
            let pt: Predictions = predict(model, &test, m.path())?;
            let acc = self.acc.get_mut(&m).expect("method registered");
            acc.primary.add(&yv, &pv.y_hat, &yt, &pt.y_hat)?;
            acc.dice.extend_from_slice(&pt.dice);
            if m == Method::VaePrimaryConcept {
                acc.concepts.resize_with(self.concept_names.len(), Pooled::default);
                for (k, pool) in acc.concepts.iter_mut().enumerate() {
                    pool.add(
                        &concept_labels(&val_refs, k)?,
                        &pv.concept_scores(k),
                        &concept_labels(&test_refs, k)?,
                        &pt.concept_scores(k),
                    )?;
                }
            }
        }
        Ok(())
    }

    fn report(&self, protocol: Protocol, seed: u64, n_subjects: usize) -> Result<MetricsReport> {
        let base = self.acc.get(&Method::Baseline);
        let base_op = base.map(|b| b.primary.youden()).transpose()?;
        let mut rows = Vec::new();
        for &m in &self.methods {
            let acc = &self.acc[&m];
            let op = acc.primary.youden()?;
            let (p_youden, p_selected) = match (base, base_op, m) {
                (Some(b), Some(bop), m) if m != Method::Baseline => (
                    Some(mcnemar(
                        &acc.primary.youden_preds(op.threshold),
                        &b.primary.youden_preds(bop.threshold),
                        &acc.primary.labels,
                    )?),
                    Some(mcnemar(&acc.primary.preds, &b.primary.preds, &acc.primary.labels)?),
                ),
                _ => (None, None),
            };
            let concept = if acc.concepts.is_empty() {
                None
            } else {
                let mut map = BTreeMap::new();
                for (name, pool) in self.concept_names.iter().zip(&acc.concepts) {
                    let cop = pool.youden()?;
                    map.insert(
                        name.clone(),
                        ConceptMetrics {
                            rates: Rates::of(cop.sen, cop.spe),
                            threshold: cop.threshold,
                            validation_selected: ValidationSelected {
                                rates: pool.selected()?,
                                thresholds: pool.thresholds.clone(),
                                mcnemar_p_vs_baseline: None,
                            },
                        },
                    );
                }
                Some(map)
            };
            rows.push(MethodRow {
                method: m,
                rates: Rates::of(op.sen, op.spe),
                threshold: op.threshold,
                dice: (!acc.dice.is_empty()).then(|| pct(acc.dice.iter().sum::<f64>() / acc.dice.len() as f64)),
                mcnemar_p_vs_baseline: p_youden,
                validation_selected: ValidationSelected {
                    rates: acc.primary.selected()?,
                    thresholds: acc.primary.thresholds.clone(),
                    mcnemar_p_vs_baseline: p_selected,
                },
                concept,
            });
        }
        Ok(MetricsReport {
            protocol,
            seed,
            n_subjects,
            methods: rows,
        })
    }
}

/// Scores already-trained models on their splits.
pub fn compare_methods(
    cohort: &[LabeledSubject],
    splits: &[Split],
    models: &[FoldModels],
    settings: &EvalSettings,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<MetricsReport> {
    settings.validate()?;
    if splits.len() != models.len() {
        return Err(Error::invalid("one set of models per split is required"));
    }
    let mut cmp = Comparison::new(&settings.methods, model_cfg);
    for (s, m) in splits.iter().zip(models) {
        cmp.add(cohort, s, m)?;
    }
    cmp.report(settings.protocol, seed, cohort.len())
}

/// Full protocol: split, train every method per split, pool test
/// predictions and compare. Test subjects never reach training or
/// threshold selection.
pub fn evaluate(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    cohort: &[LabeledSubject],
    pool: &[SegSequence],
    settings: &EvalSettings,
    ckpt_dir: Option<&FsPath>,
) -> Result<(MetricsReport, Vec<Split>, Vec<FoldModels>)> {
    settings.validate()?;
    let splits = splits(cohort, settings.protocol, cfg.validation_fraction, cfg.seed)?;
    let mut models = Vec::with_capacity(splits.len());
    for (f, split) in splits.iter().enumerate() {
        let dir = match ckpt_dir {
            Some(d) if splits.len() > 1 => {
                let sub = d.join(format!("fold{f}"));
                std::fs::create_dir_all(&sub)?;
                Some(sub)
            }
            Some(d) => Some(d.to_path_buf()),
            None => None,
        };
        let data = train_data(cohort, pool, split);
        log::info!("split {f}: {} fit, {} validation, {} test", split.fit.len(), split.validation.len(), split.test.len());
        models.push(train_methods(cfg, model_cfg, &data, &settings.methods, dir.as_deref())?);
    }
    let report = compare_methods(cohort, &splits, &models, settings, model_cfg, cfg.seed)?;
    Ok((report, splits, models))
}

/// 5-fold (or k-fold) stratified cross-validation of the three methods.
pub fn cross_validate(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    cohort: &[LabeledSubject],
    pool: &[SegSequence],
    folds: usize,
) -> Result<MetricsReport> {
    Ok(evaluate(cfg, model_cfg, cohort, pool, &EvalSettings::cross_validation(folds), None)?.0)
}

/// Mean Dice over classes 1-3 between each subject and its reconstruction.
pub fn reconstruction_dice(model: &Model, subjects: &[LabeledSubject]) -> Result<f64> {
    let p = predict(model, subjects, Path::Full)?;
    p.mean_dice().ok_or_else(|| Error::invalid("no subjects"))
}

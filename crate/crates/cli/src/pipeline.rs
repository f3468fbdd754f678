//! Phase orchestration over an experiment directory:
//!
//! ```text
//! <out_dir>/manifest.json
//!          config.toml
//!          data/      cohort.segs, pool.segs, splits.json
//!          ckpt/      stage{1,2,3}.ckpt, baseline.ckpt, history.jsonl  (fold{f}/ under CV)
//!          reports/   report.json, interpretation.json, pca_coords.csv
//!          figures/   pca_scatter.png, concept_mean_mmode.png, concept_absent_mmode.png, traversal.png
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use conceptvae::evaluation::{self, FoldModels, MetricsReport, Split};
use conceptvae::interpret::{self, Selector};
use conceptvae::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, Model};
use conceptvae::phantom::{self, load_dataset, save_dataset, LabeledSubject, SegSequence};
use conceptvae::rng;
use conceptvae::training::{self, checkpoint_name, TrainConfig, BASELINE_STAGE};
use conceptvae::{Error, Result};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
const POOL_SEED_STREAM: u64 = 0x50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Generate,
    /// stage 1: VAE loss on the pool, then on the training cohort
    Pretrain,
    /// stages 2 and 3
    Train,
    Eval,
    Interpret,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Generate, Phase::Pretrain, Phase::Train, Phase::Eval, Phase::Interpret];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Generate => "generate",
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
            Phase::Eval => "eval",
            Phase::Interpret => "interpret",
        }
    }

    pub fn prerequisites(self) -> &'static [Phase] {
        match self {
            Phase::Generate => &[],
            Phase::Pretrain => &[Phase::Generate],
            Phase::Train => &[Phase::Generate, Phase::Pretrain],
            Phase::Eval | Phase::Interpret => &[Phase::Generate, Phase::Train],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("phases", format!("unknown phase '{s}'")))
    }
}

/// Parses `generate,train` or `all`.
pub fn parse_phases(s: &str) -> Result<Vec<Phase>> {
    if s == "all" {
        return Ok(Phase::ALL.to_vec());
    }
    let set: BTreeSet<Phase> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Dataset,
    Checkpoint,
    Log,
    Report,
    Figure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// relative to the experiment directory, `/`-separated
    pub path: String,
    pub kind: ArtifactKind,
    pub phase: Phase,
    pub sha256: String,
    pub created_at: String,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub config_hash: String,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub phases: Vec<PhaseRecord>,
    pub artifacts: Vec<Artifact>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl ExperimentManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            schema_version: crate::config::SCHEMA_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            phases: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn artifacts_of(&self, phase: Phase) -> impl Iterator<Item = &Artifact> {
        self.artifacts.iter().filter(move |a| a.phase == phase)
    }

    pub fn count(&self, kind: ArtifactKind) -> usize {
        self.artifacts.iter().filter(|a| a.kind == kind).count()
    }

    /// Every listed artifact exists and still has its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.exists() {
                return Err(Error::Dependency(format!("artifact {} is missing", a.path)));
            }
            if sha256_file(&p)? != a.sha256 {
                return Err(Error::Dependency(format!("artifact {} was modified", a.path)));
            }
        }
        Ok(())
    }

    fn is_complete(&self, phase: Phase, hash: &str, dir: &Path) -> bool {
        self.phases.iter().any(|r| r.phase == phase && r.config_hash == hash)
            && self
                .artifacts_of(phase)
                .all(|a| sha256_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }

    /// Drops `phase` and every phase after it.
    fn invalidate_from(&mut self, phase: Phase) {
        self.phases.retain(|r| r.phase < phase);
        self.artifacts.retain(|a| a.phase < phase);
    }
}

/// Advisory lock on an experiment directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(format!(
                "{} exists; another run is using {} (remove the file if it is stale)",
                path.display(),
                dir.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// re-run requested phases even when they are complete
    pub force: bool,
    /// recorded with every artifact
    pub command: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: ExperimentManifest,
    pub executed: Vec<Phase>,
    pub skipped: Vec<Phase>,
    /// artifacts written by this run
    pub created: Vec<String>,
}

/// Paths inside an experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn ckpt(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn cohort(&self) -> PathBuf {
        self.data().join("cohort.segs")
    }

    pub fn pool(&self) -> PathBuf {
        self.data().join("pool.segs")
    }

    pub fn splits(&self) -> PathBuf {
        self.data().join("splits.json")
    }

    /// Checkpoint directory of split `f` out of `n`.
    pub fn fold_ckpt(&self, f: usize, n: usize) -> PathBuf {
        if n > 1 {
            self.ckpt().join(format!("fold{f}"))
        } else {
            self.ckpt()
        }
    }

    pub fn report(&self) -> PathBuf {
        self.reports().join("report.json")
    }

    pub fn interpretation(&self) -> PathBuf {
        self.reports().join("interpretation.json")
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    layout: Layout,
    manifest: ExperimentManifest,
    command: String,
    created: Vec<String>,
}

impl Ctx<'_> {
    fn register(&mut self, path: &Path, kind: ArtifactKind, phase: Phase) -> Result<()> {
        let rel = path
            .strip_prefix(&self.layout.root)
            .map_err(|_| Error::invalid(format!("{} is outside the experiment directory", path.display())))?;
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        self.manifest.artifacts.retain(|a| a.path != rel);
        self.manifest.artifacts.push(Artifact {
            path: rel.clone(),
            kind,
            phase,
            sha256: sha256_file(path)?,
            created_at: now(),
            command: self.command.clone(),
        });
        self.created.push(rel);
        Ok(())
    }

    fn train_cfg(&self) -> TrainConfig {
        self.cfg.train_config()
    }

    fn cohort(&self) -> Result<Vec<LabeledSubject>> {
        load_dataset(&self.layout.cohort())
    }

    fn pool(&self) -> Result<Vec<SegSequence>> {
        if self.cfg.pool.n == 0 {
            return Ok(Vec::new());
        }
        Ok(load_dataset(&self.layout.pool())?.into_iter().map(|s| s.sequence).collect())
    }

    fn splits(&self) -> Result<Vec<Split>> {
        Ok(serde_json::from_slice(&fs::read(self.layout.splits())?)?)
    }
}

pub fn pool_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[POOL_SEED_STREAM])
}

fn generate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    fs::create_dir_all(ctx.layout.data())?;
    let cohort = phantom::generate_cohort_shaped(&cfg.cohort, cfg.shape(), cfg.model.frames, cfg.seed)?;
    save_dataset(&cohort, &ctx.layout.cohort())?;
    ctx.register(&ctx.layout.cohort(), ArtifactKind::Dataset, Phase::Generate)?;
    if cfg.pool.n > 0 {
        let pool = phantom::pool_subjects(cfg.pool.n, cfg.shape(), cfg.model.frames, pool_seed(cfg.seed))?;
        save_dataset(&pool, &ctx.layout.pool())?;
        ctx.register(&ctx.layout.pool(), ArtifactKind::Dataset, Phase::Generate)?;
    }
    let splits = evaluation::splits(&cohort, cfg.eval.protocol, cfg.train.validation_fraction, cfg.seed)?;
    fs::write(ctx.layout.splits(), serde_json::to_vec_pretty(&splits)?)?;
    ctx.register(&ctx.layout.splits(), ArtifactKind::Dataset, Phase::Generate)
}

/// Runs stages up to `last` on every split, resuming from stage `from`.
fn train_stages(ctx: &mut Ctx, phase: Phase, from: u8, last: u8) -> Result<()> {
    let cohort = ctx.cohort()?;
    let pool = if from == 0 { ctx.pool()? } else { Vec::new() };
    let splits = ctx.splits()?;
    let tcfg = ctx.train_cfg();
    for (f, split) in splits.iter().enumerate() {
        let dir = ctx.layout.fold_ckpt(f, splits.len());
        fs::create_dir_all(&dir)?;
        let history = dir.join("history.jsonl");
        let resume = if from == 0 {
            if history.exists() {
                fs::remove_file(&history)?;
            }
            None
        } else {
            Some(load_checkpoint(&dir.join(checkpoint_name(from)))?)
        };
        let data = evaluation::train_data(&cohort, &pool, split);
        log::info!("{phase} split {f}: stages {}..={last}", from + 1);
        let res = training::run_stages(&tcfg, &ctx.cfg.model, &data, Some(&dir), Some(&history), resume, last)?;
        for p in &res.paths {
            ctx.register(p, ArtifactKind::Checkpoint, phase)?;
        }
        ctx.register(&history, ArtifactKind::Log, phase)?;
    }
    Ok(())
}

fn baseline_checkpoint(model: Model, cfg: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        header: CheckpointHeader {
            model: model.config.clone(),
            weights: cfg.weights.clone(),
            config_hash: cfg.hash(&model.config),
            train: serde_json::to_value(cfg)?,
            seed: cfg.seed,
            stage: BASELINE_STAGE,
        },
        model,
    })
}

fn eval(ctx: &mut Ctx) -> Result<()> {
    let cohort = ctx.cohort()?;
    let splits = ctx.splits()?;
    let tcfg = ctx.train_cfg();
    let methods = &ctx.cfg.eval.methods;
    let mut models = Vec::with_capacity(splits.len());
    for (f, split) in splits.iter().enumerate() {
        let dir = ctx.layout.fold_ckpt(f, splits.len());
        let mut fm = FoldModels::default();
        if methods.contains(&evaluation::Method::Baseline) {
            let data = evaluation::train_data(&cohort, &[], split);
            let (m, _) = training::train_baseline(&ctx.cfg.model, &data, &tcfg, &mut |_| Ok(()))?;
            let path = dir.join("baseline.ckpt");
            let ck = baseline_checkpoint(m, &tcfg)?;
            save_checkpoint(&ck, &path)?;
            ctx.register(&path, ArtifactKind::Checkpoint, Phase::Eval)?;
            fm.baseline = Some(ck.model);
        }
        for stage in [2u8, 3] {
            fm.stages.push(load_checkpoint(&dir.join(checkpoint_name(stage)))?);
        }
        models.push(fm);
    }
    let report = evaluation::compare_methods(&cohort, &splits, &models, &ctx.cfg.eval, &ctx.cfg.model, ctx.cfg.seed)?;
    fs::create_dir_all(ctx.layout.reports())?;
    write_report(&report, &ctx.layout.report())?;
    ctx.register(&ctx.layout.report(), ArtifactKind::Report, Phase::Eval)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Measurements behind the interpretation figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationSummary {
    pub concept: String,
    pub selector: Selector,
    pub concept_group_size: usize,
    pub rest_group_size: usize,
    /// early-systolic septal shift of the decoded group means, pixels;
    /// null when the decoding shows no LV or no early-systolic frame
    pub septal_displacement_concept: Option<f64>,
    pub septal_displacement_rest: Option<f64>,
    pub pca_explained: [f64; 2],
    /// logistic probe on the 2-D PCA coordinates vs the primary label
    pub pca_probe_accuracy: f64,
    pub traversal: Vec<TraversalSample>,
    /// y_hat(+span) - y_hat(-span)
    pub traversal_delta: f64,
    pub mmode_line: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalSample {
    pub lambda: f64,
    pub y_hat: f64,
}

/// M-mode line: configured, else through the ventricles of the first
/// subject, else across the middle row.
pub fn mmode_line(cfg: &ExperimentConfig, cohort: &[LabeledSubject]) -> [usize; 4] {
    if let Some(l) = cfg.interpret.line {
        return l;
    }
    cohort
        .first()
        .and_then(|s| interpret::default_mmode_line(&s.sequence, cfg.interpret.slice).ok())
        .map(|((x0, y0), (x1, y1))| [x0, y0, x1, y1])
        .unwrap_or([0, cfg.model.height / 2, cfg.model.width - 1, cfg.model.height / 2])
}

/// Figures and measurements for a trained model over `subjects`.
pub fn interpret_model(
    cfg: &ExperimentConfig,
    model: &Model,
    subjects: &[LabeledSubject],
    figures: &Path,
    reports: &Path,
) -> Result<(InterpretationSummary, Vec<PathBuf>, Vec<PathBuf>)> {
    let i = &cfg.interpret;
    let k = cfg.concept_index()?;
    let lat = interpret::collect_latents(model, subjects)?;
    let pca = interpret::pca2(&lat.rows)?;
    let probe = interpret::linear_probe_accuracy(&pca.coords, &lat.y)?;
    let scatter = figures.join("pca_scatter.png");
    let coords = reports.join("pca_coords.csv");
    interpret::scatter_png(&pca, &lat, &scatter)?;
    interpret::write_coords_csv(&pca, &lat, &coords)?;

    let line = mmode_line(cfg, subjects);
    let (p0, p1) = ((line[0], line[1]), (line[2], line[3]));
    let group = |value: u8, name: &str| -> Result<(usize, Option<f64>, PathBuf)> {
        let members = interpret::select_group(model, subjects, i.selector, k, value)?;
        let g = interpret::decode_group_mean(model, subjects, &members)?;
        let path = figures.join(name);
        interpret::mmode_png(&interpret::mmode(&g.sequence, i.slice, p0, p1)?, 4, &path)?;
        let d = match interpret::septal_displacement(&g.sequence) {
            Ok(d) => Some(d),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        Ok((members.len(), d, path))
    };
    let (n_concept, d_concept, fig_concept) = group(1, "concept_mean_mmode.png")?;
    let (n_rest, d_rest, fig_rest) = group(0, "concept_absent_mmode.png")?;

    let points = interpret::traverse_boundary(model, subjects, i.steps, i.span)?;
    let traversal_fig = figures.join("traversal.png");
    interpret::traversal_png(&points, i.slice, &traversal_fig)?;
    let delta = points.last().map_or(0.0, |p| p.y_hat) - points.first().map_or(0.0, |p| p.y_hat);

    let summary = InterpretationSummary {
        concept: i.concept.clone(),
        selector: i.selector,
        concept_group_size: n_concept,
        rest_group_size: n_rest,
        septal_displacement_concept: d_concept,
        septal_displacement_rest: d_rest,
        pca_explained: pca.explained,
        pca_probe_accuracy: probe,
        traversal: points.iter().map(|p| TraversalSample { lambda: p.lambda, y_hat: p.y_hat }).collect(),
        traversal_delta: delta,
        mmode_line: line,
    };
    Ok((summary, vec![scatter, fig_concept, fig_rest, traversal_fig], vec![coords]))
}

fn interpret_phase(ctx: &mut Ctx) -> Result<()> {
    let cohort = ctx.cohort()?;
    let n = ctx.splits()?.len();
    let ck = load_checkpoint(&ctx.layout.fold_ckpt(0, n).join(checkpoint_name(3)))?;
    fs::create_dir_all(ctx.layout.figures())?;
    fs::create_dir_all(ctx.layout.reports())?;
    let (summary, figures, reports) =
        interpret_model(ctx.cfg, &ck.model, &cohort, &ctx.layout.figures(), &ctx.layout.reports())?;
    for f in figures {
        ctx.register(&f, ArtifactKind::Figure, Phase::Interpret)?;
    }
    for r in reports {
        ctx.register(&r, ArtifactKind::Report, Phase::Interpret)?;
    }
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    fs::write(ctx.layout.interpretation(), bytes)?;
    ctx.register(&ctx.layout.interpretation(), ArtifactKind::Report, Phase::Interpret)
}

/// Executes `phases` in canonical order inside `cfg.out_dir`. A phase that
/// already completed under the same config hash is skipped unless forced;
/// re-running a phase invalidates the phases after it.
pub fn run_pipeline(cfg: &ExperimentConfig, phases: &[Phase], opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let root = cfg.out_dir.clone();
    fs::create_dir_all(&root)?;
    let _lock = DirLock::acquire(&root)?;
    let hash = cfg.hash();
    let mut manifest = ExperimentManifest::load(&root)?.unwrap_or_else(|| ExperimentManifest::new(cfg));
    if manifest.config_hash != hash {
        log::info!("config changed ({} -> {}); earlier phases are stale", manifest.config_hash, hash);
        manifest.config_hash = hash.clone();
        manifest.seed = cfg.seed;
    }
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;

    let requested: BTreeSet<Phase> = phases.iter().copied().collect();
    let mut ctx = Ctx {
        cfg,
        layout: Layout::new(&root),
        manifest,
        command: opts.command.clone(),
        created: Vec::new(),
    };
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    for phase in requested.iter().copied() {
        for &pre in phase.prerequisites() {
            if !ctx.manifest.is_complete(pre, &hash, &root) {
                return Err(Error::Dependency(format!(
                    "phase '{phase}' needs '{pre}', which has not completed under this config"
                )));
            }
        }
        if !opts.force && ctx.manifest.is_complete(phase, &hash, &root) {
            log::info!("phase {phase}: up to date");
            skipped.push(phase);
            continue;
        }
        log::info!("phase {phase}: running");
        ctx.manifest.invalidate_from(phase);
        match phase {
            Phase::Generate => generate(&mut ctx)?,
            Phase::Pretrain => train_stages(&mut ctx, phase, 0, 1)?,
            Phase::Train => train_stages(&mut ctx, phase, 1, 3)?,
            Phase::Eval => eval(&mut ctx)?,
            Phase::Interpret => interpret_phase(&mut ctx)?,
        }
        ctx.manifest.phases.push(PhaseRecord {
            phase,
            config_hash: hash.clone(),
            completed_at: now(),
        });
        ctx.manifest.save(&root)?;
        executed.push(phase);
    }
    ctx.manifest.save(&root)?;
    Ok(RunOutcome {
        manifest: ctx.manifest,
        executed,
        skipped,
        created: ctx.created,
    })
}

/// Reads `reports/report.json` of an experiment directory.
pub fn read_report(root: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_reader(File::open(Layout::new(root).report())?)?)
}

pub fn read_interpretation(root: &Path) -> Result<InterpretationSummary> {
    Ok(serde_json::from_reader(File::open(Layout::new(root).interpretation())?)?)
}

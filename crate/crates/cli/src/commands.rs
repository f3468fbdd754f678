use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use conceptvae::evaluation::{self, EvalSettings, Method, Protocol};
use conceptvae::interpret::{self, Selector};
use conceptvae::model::{load_checkpoint, Checkpoint, ModelConfig};
use conceptvae::nn::Module;
use conceptvae::phantom::{self, load_dataset, save_dataset, FrameShape, GenerativeFactors, LabeledSubject, SegSequence};
use conceptvae::training::{self, TrainConfig, TrainData};
use conceptvae::{Error, Result};

use crate::config::{load_config, ExperimentConfig};
use crate::pipeline::{self, parse_phases, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "conceptvae", version, about = "Concept-disentangled VAE classifier over cine segmentation sequences")]
pub struct Cli {
    /// experiment config (TOML); `CONCEPTVAE_*` variables override its keys
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// master seed, overrides the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output file or directory of the command
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic cohorts and pretraining pools
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Run the staged training schedule
    Train(TrainArgs),
    /// Short schedules over a grid of β values
    SweepBeta(SweepArgs),
    /// Compare baseline, VAE + primary and VAE + primary + concept
    Eval(EvalArgs),
    /// Latent-space figures
    #[command(subcommand)]
    Interpret(InterpretCmd),
    /// Run pipeline phases in an experiment directory
    Run(RunArgs),
    /// Print the resolved config (or a checkpoint's) and the parameter count
    Describe(DescribeArgs),
    /// Write a preset config to --out (stdout without it)
    Init(InitArgs),
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Preset {
    /// published scale: D=128, 800/500/300 epochs
    Paper,
    /// workstation scale: D=32, 50/50/30 epochs, 200 subjects
    Desk,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = phantom::DEFAULT_FRAMES)]
        t: usize,
        #[arg(long, default_value_t = phantom::DEFAULT_SIZE)]
        size: usize,
    },
    PretrainPool {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = phantom::DEFAULT_FRAMES)]
        t: usize,
        #[arg(long, default_value_t = phantom::DEFAULT_SIZE)]
        size: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// last stage to run: 1, 2, 3 or all
    #[arg(long, default_value = "all")]
    pub stage: String,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.5,1.0")]
    pub betas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// checkpoint whose model and training settings are re-trained per fold
    #[arg(long)]
    pub ckpt: PathBuf,
    /// labeled cohort (.segs)
    #[arg(long)]
    pub data: PathBuf,
    /// unlabeled pool (.segs) for stage-1 pretraining
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, default_value_t = 5, conflicts_with = "holdout")]
    pub folds: usize,
    /// single stratified hold-out split with this test fraction
    #[arg(long)]
    pub holdout: Option<f64>,
    /// keep per-fold checkpoints in this directory
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelData {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum InterpretCmd {
    /// PCA scatter of per-subject latent means; coordinates go to a CSV beside the PNG
    Pca {
        #[command(flatten)]
        io: ModelData,
    },
    /// Decoded mean of the subjects showing a concept, as .segs plus an M-mode PNG
    ConceptMean {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, default_value = "SF")]
        concept: String,
        #[arg(long, default_value = "label")]
        selector: Selector,
        #[arg(long, default_value_t = 1)]
        slice: usize,
        #[arg(long, value_parser = parse_line)]
        line: Option<[usize; 4]>,
    },
    /// M-mode image of one subject along a line
    Mmode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long, default_value_t = 1)]
        slice: usize,
        #[arg(long, value_parser = parse_line)]
        line: Option<[usize; 4]>,
    },
    /// Decodings along the line between the primary class means
    Traverse {
        #[command(flatten)]
        io: ModelData,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long, default_value_t = 1.5)]
        span: f64,
        #[arg(long, default_value_t = 1)]
        slice: usize,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// comma-separated subset of generate,pretrain,train,eval,interpret
    #[arg(long, default_value = "all")]
    pub phases: String,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

fn parse_line(s: &str) -> std::result::Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected x0,y0,x1,y1".to_string())
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::config("--out", "this command needs an output path"))
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn square(size: usize) -> FrameShape {
    FrameShape {
        height: size,
        width: size,
        ..FrameShape::default()
    }
}

/// Cohort and pool named in the config, generated when no path is set.
fn experiment_data(cfg: &ExperimentConfig) -> Result<(Vec<LabeledSubject>, Vec<SegSequence>)> {
    let cohort = match &cfg.train.cohort_path {
        Some(p) => load_dataset(p)?,
        None => phantom::generate_cohort_shaped(&cfg.cohort, cfg.shape(), cfg.model.frames, cfg.seed)?,
    };
    let pool = match &cfg.train.pool_path {
        Some(p) => load_dataset(p)?.into_iter().map(|s| s.sequence).collect(),
        None if cfg.pool.n > 0 => phantom::pool_subjects(cfg.pool.n, cfg.shape(), cfg.model.frames, pipeline::pool_seed(cfg.seed))?
            .into_iter()
            .map(|s| s.sequence)
            .collect(),
        None => Vec::new(),
    };
    Ok((cohort, pool))
}

/// Training data of the first split under the configured protocol.
fn first_split(cfg: &ExperimentConfig) -> Result<TrainData> {
    let (cohort, pool) = experiment_data(cfg)?;
    let splits = evaluation::splits(&cohort, cfg.eval.protocol, cfg.train.validation_fraction, cfg.seed)?;
    Ok(evaluation::train_data(&cohort, &pool, &splits[0]))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(cmd) => phantom_cmd(cli, cmd),
        Command::Train(a) => train_cmd(cli, a),
        Command::SweepBeta(a) => sweep_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Interpret(cmd) => interpret_cmd(cli, cmd),
        Command::Run(a) => run_cmd(cli, a),
        Command::Describe(a) => describe_cmd(cli, a),
        Command::Init(a) => init_cmd(cli, a),
    }
}

fn phantom_cmd(cli: &Cli, cmd: &PhantomCmd) -> Result<()> {
    let out = required_out(cli)?;
    ensure_parent(out)?;
    let seed = cli.seed.unwrap_or(0);
    let subjects = match *cmd {
        PhantomCmd::Generate { n, t, size } => {
            let spec = phantom::CohortSpec {
                n_subjects: n,
                ..phantom::CohortSpec::default()
            };
            phantom::generate_cohort_shaped(&spec, square(size), t, seed)?
        }
        PhantomCmd::PretrainPool { n, t, size } => phantom::pool_subjects(n, square(size), t, seed)?,
    };
    save_dataset(&subjects, out)?;
    println!("wrote {} subjects to {}", subjects.len(), out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = experiment(cli)?;
    let last: u8 = match a.stage.as_str() {
        "all" => 3,
        s => s
            .parse()
            .ok()
            .filter(|v| (1..=3).contains(v))
            .ok_or_else(|| Error::config("--stage", "expected 1, 2, 3 or all"))?,
    };
    let dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.join("ckpt"));
    fs::create_dir_all(&dir)?;
    let resume = a.resume.as_deref().map(load_model).transpose()?;
    let data = first_split(&cfg)?;
    let res = training::run_stages(
        &cfg.train_config(),
        &cfg.model,
        &data,
        Some(&dir),
        Some(&dir.join("history.jsonl")),
        resume,
        last,
    )?;
    for p in &res.paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let cfg = experiment(cli)?;
    let data = first_split(&cfg)?;
    let report = training::beta_sweep(&cfg.train_config(), &cfg.model, &data, &a.betas)?;
    for r in &report.rows {
        println!(
            "beta {:<8} dice {:.4} kl/dim {:.4} primary {:.4} concepts {:?}",
            r.beta, r.dice, r.kl_per_dim, r.primary_bacc, r.concept_bacc
        );
    }
    println!("recommended beta {}", report.recommended_beta);
    if let Some(out) = &cli.out {
        write_json(&report, out)?;
    }
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = load_model(&a.ckpt)?;
    let mut tcfg: TrainConfig = serde_json::from_value(ck.header.train.clone())
        .map_err(|e| Error::format("header.train", e.to_string()))?;
    if let Some(s) = cli.seed {
        tcfg.seed = s;
    }
    let cohort = load_dataset(&a.data)?;
    let pool: Vec<SegSequence> = match &a.pool {
        Some(p) => load_dataset(p)?.into_iter().map(|s| s.sequence).collect(),
        None => Vec::new(),
    };
    if pool.is_empty() {
        tcfg.pool_epochs = 0;
    }
    let settings = EvalSettings {
        protocol: match a.holdout {
            Some(test_fraction) => Protocol::Holdout { test_fraction },
            None => Protocol::CrossValidation { folds: a.folds },
        },
        methods: Method::ALL.to_vec(),
    };
    if let Some(d) = &a.ckpt_dir {
        fs::create_dir_all(d)?;
    }
    let (report, _, _) = evaluation::evaluate(&tcfg, &ck.header.model, &cohort, &pool, &settings, a.ckpt_dir.as_deref())?;
    for r in &report.methods {
        println!(
            "{:<20} BACC {:6.2} SEN {:6.2} SPE {:6.2} Dice {} p {}",
            r.method.name(),
            r.rates.bacc,
            r.rates.sen,
            r.rates.spe,
            r.dice.map_or("-".into(), |d| format!("{d:.2}")),
            r.mcnemar_p_vs_baseline.map_or("-".into(), |p| format!("{p:.3}")),
        );
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.json"));
    ensure_parent(&out)?;
    pipeline::write_report(&report, &out)
}

fn check_slice(model: &ModelConfig, slice: usize) -> Result<()> {
    if slice >= model.slices {
        return Err(Error::config("--slice", format!("must be < {}", model.slices)));
    }
    Ok(())
}

fn interpret_cmd(cli: &Cli, cmd: &InterpretCmd) -> Result<()> {
    let out = required_out(cli)?;
    match cmd {
        InterpretCmd::Pca { io } => {
            let ck = load_model(&io.ckpt)?;
            let subjects = load_dataset(&io.data)?;
            let lat = interpret::collect_latents(&ck.model, &subjects)?;
            let pca = interpret::pca2(&lat.rows)?;
            ensure_parent(out)?;
            interpret::scatter_png(&pca, &lat, out)?;
            interpret::write_coords_csv(&pca, &lat, &out.with_extension("csv"))?;
            let acc = interpret::linear_probe_accuracy(&pca.coords, &lat.y)?;
            println!(
                "explained variance {:.3} {:.3}; linear probe accuracy on y {:.3}",
                pca.explained[0], pca.explained[1], acc
            );
        }
        InterpretCmd::ConceptMean { io, concept, selector, slice, line } => {
            let ck = load_model(&io.ckpt)?;
            check_slice(&ck.model.config, *slice)?;
            let k = ck
                .model
                .config
                .concepts
                .iter()
                .position(|c| &c.name == concept)
                .ok_or_else(|| Error::config("--concept", format!("no concept named '{concept}'")))?;
            let subjects = load_dataset(&io.data)?;
            let g = interpret::concept_mean_decode(&ck.model, &subjects, *selector, k)?;
            ensure_parent(out)?;
            let decoded = LabeledSubject {
                sequence: g.sequence.clone(),
                y: 0,
                y_k: Vec::new(),
                factors: GenerativeFactors {
                    contraction_amplitude: 0.0,
                    sf_amplitude: 0.0,
                    hidden_factor: 0.0,
                    base_radius: 0.0,
                    center_x: 0.0,
                    center_y: 0.0,
                },
                seed: 0,
            };
            save_dataset(&[decoded], out)?;
            let [x0, y0, x1, y1] = match line {
                Some(l) => *l,
                None => {
                    let mut cfg = ExperimentConfig {
                        model: ck.model.config.clone(),
                        ..ExperimentConfig::default()
                    };
                    cfg.interpret.slice = *slice;
                    pipeline::mmode_line(&cfg, &subjects)
                }
            };
            let img = interpret::mmode(&g.sequence, *slice, (x0, y0), (x1, y1))?;
            interpret::mmode_png(&img, 4, &out.with_extension("png"))?;
            match interpret::septal_displacement(&g.sequence) {
                Ok(d) => println!("{} subjects; septal displacement {d:.2} px", g.members.len()),
                Err(e) => println!("{} subjects; septal displacement undefined ({e})", g.members.len()),
            }
        }
        InterpretCmd::Mmode { data, subject, slice, line } => {
            let subjects = load_dataset(data)?;
            let s = subjects
                .get(*subject)
                .ok_or_else(|| Error::config("--subject", format!("dataset holds {} subjects", subjects.len())))?;
            let ((x0, y0), (x1, y1)) = match line {
                Some([a, b, c, d]) => ((*a, *b), (*c, *d)),
                None => interpret::default_mmode_line(&s.sequence, *slice)?,
            };
            let img = interpret::mmode(&s.sequence, *slice, (x0, y0), (x1, y1))?;
            ensure_parent(out)?;
            interpret::mmode_png(&img, 4, out)?;
        }
        InterpretCmd::Traverse { io, steps, span, slice } => {
            let ck = load_model(&io.ckpt)?;
            check_slice(&ck.model.config, *slice)?;
            let subjects = load_dataset(&io.data)?;
            let points = interpret::traverse_boundary(&ck.model, &subjects, *steps, *span)?;
            fs::create_dir_all(out)?;
            interpret::traversal_png(&points, *slice, &out.join("traversal.png"))?;
            let samples: Vec<pipeline::TraversalSample> = points
                .iter()
                .map(|p| pipeline::TraversalSample { lambda: p.lambda, y_hat: p.y_hat })
                .collect();
            write_json(&samples, &out.join("traversal.json"))?;
            for p in &samples {
                println!("lambda {:+.3} y_hat {:.4}", p.lambda, p.y_hat);
            }
        }
    }
    Ok(())
}

fn run_cmd(cli: &Cli, a: &RunArgs) -> Result<()> {
    let mut cfg = experiment(cli)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let phases = parse_phases(&a.phases)?;
    let opts = RunOptions {
        force: a.force,
        command: std::env::args().collect::<Vec<_>>().join(" "),
    };
    let outcome = pipeline::run_pipeline(&cfg, &phases, &opts)?;
    for p in &outcome.executed {
        println!("ran {p}");
    }
    for p in &outcome.skipped {
        println!("skipped {p} (up to date)");
    }
    println!("{} new artifacts in {}", outcome.created.len(), cfg.out_dir.display());
    Ok(())
}

fn describe_cmd(cli: &Cli, a: &DescribeArgs) -> Result<()> {
    match &a.ckpt {
        Some(p) => {
            let ck = load_model(p)?;
            println!("{}", serde_json::to_string_pretty(&ck.header)?);
            println!("parameters: {}", ck.model.param_count());
        }
        None => {
            let cfg = experiment(cli)?;
            print!("{}", cfg.to_toml()?);
            let model: conceptvae::model::Model = conceptvae::model::Model::new(cfg.model.clone(), cfg.seed)?;
            println!("# parameters: {}", model.param_count());
            println!("# config hash: {}", cfg.hash());
        }
    }
    Ok(())
}

fn init_cmd(cli: &Cli, a: &InitArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Paper => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let text = cfg.to_toml()?;
    match &cli.out {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// 0 success, 1 usage or configuration error, 2 runtime or data error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

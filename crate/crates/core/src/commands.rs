//! The four user-facing commands. Each writes only files under its output
//! directory and is a pure function of its arguments and inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Manifest};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, write_tasks, DatasetError, DatasetManifest, MANIFEST_FILE, TASKS_FILE};
use crate::eval::{evaluate, run_task, EvalReport};
use crate::metrics::Metrics;
use crate::model::DlrModel;
use crate::stage1::train_stage1;
use crate::stage2::train_stage2;
use crate::stage3::{train_stage3, RlFlags};
use crate::synth::{generate_dataset, generate_task, oracle_solve, parse_task_id, Family, TaskError, TaskInstance};
use crate::TrainError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("stage {stage} needs a stage-{want} checkpoint: set `init_checkpoint` in the config")]
    MissingCheckpoint { stage: u8, want: u8 },
    #[error("stage {stage} needs a stage-{want} checkpoint, got one from stage {got}")]
    WrongStage { stage: u8, want: u8, got: u8 },
    #[error("invalid arguments: {0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io { path: path.display().to_string(), source }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CommandError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

// ---- gen-data ----

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataArgs {
    pub seed: u64,
    pub count: usize,
    pub families: Vec<Family>,
    pub grid: usize,
    pub out: PathBuf,
}

pub fn gen_data(args: &GenDataArgs) -> Result<DatasetManifest, CommandError> {
    if args.families.is_empty() {
        return Err(CommandError::Usage("at least one family is required".into()));
    }
    let tasks = generate_dataset(args.seed, args.count, &args.families, args.grid)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_tasks(&args.out.join(TASKS_FILE), &tasks)?;
    let manifest = DatasetManifest {
        seed_start: args.seed,
        count: args.count,
        families: args.families.clone(),
        grid_size: args.grid,
        ids: tasks.iter().map(|t| t.id.clone()).collect(),
    };
    write(&args.out.join(MANIFEST_FILE), pretty(&manifest))?;
    Ok(manifest)
}

// ---- train ----

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainArgs {
    pub stage: u8,
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub skip_pretrain: bool,
    pub no_focus_reward: bool,
    pub freeze_latent_policy: bool,
    /// Mirror metrics records to stderr.
    pub echo: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub stage: u8,
    pub report: serde_json::Value,
    pub checkpoint: PathBuf,
}

fn load_init(cfg: &RunConfig, stage: u8) -> Result<(DlrModel, diffcore::ParamStore), CommandError> {
    let want = stage - 1;
    let path = cfg.init_checkpoint.as_ref().ok_or(CommandError::MissingCheckpoint { stage, want })?;
    let (store, manifest) = checkpoint::load(path)?;
    if manifest.stage != want {
        return Err(CommandError::WrongStage { stage, want, got: manifest.stage });
    }
    let model = DlrModel::bind(&cfg.model, &cfg.grounder, &store).map_err(TrainError::from)?;
    Ok((model, store))
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome, CommandError> {
    let stage = args.stage;
    if !(1..=3).contains(&stage) {
        return Err(CommandError::Usage(format!("--stage must be 1, 2 or 3, got {stage}")));
    }
    if args.skip_pretrain && stage != 2 {
        return Err(CommandError::Usage("--skip-pretrain only applies to stage 2".into()));
    }
    if (args.no_focus_reward || args.freeze_latent_policy) && stage != 3 {
        return Err(CommandError::Usage("--no-focus-reward and --freeze-latent-policy only apply to stage 3".into()));
    }
    let config_text = fs::read_to_string(&args.config).map_err(io_err(&args.config))?;
    let cfg = RunConfig::from_toml(&config_text)?;
    if let Some(p) = &cfg.dev_data {
        if !p.exists() {
            return Err(CommandError::Usage(format!("dev_data {} does not exist", p.display())));
        }
    }
    let tasks = load_dataset(&args.data)?;
    let dev: Vec<TaskInstance> = match &cfg.dev_data {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let mut metrics = Metrics::new();
    metrics.echo = args.echo;
    let (model, mut store) = match stage {
        1 => DlrModel::init(&cfg.model, &cfg.grounder, cfg.seed).map_err(TrainError::from)?,
        2 if args.skip_pretrain => DlrModel::init(&cfg.model, &cfg.grounder, cfg.seed).map_err(TrainError::from)?,
        _ => load_init(&cfg, stage)?,
    };
    let report = match stage {
        1 => json!(train_stage1(&model, &mut store, &tasks, &dev, &cfg.stage1, &cfg.optim, cfg.seed, &mut metrics)?),
        2 => json!(train_stage2(&model, &mut store, &tasks, &dev, &cfg.stage2, &cfg.optim, cfg.caps, cfg.seed, &mut metrics)?),
        _ => {
            let flags = RlFlags { no_focus_reward: args.no_focus_reward, freeze_latent_policy: args.freeze_latent_policy };
            json!(train_stage3(
                &model, &mut store, &tasks, &dev, &cfg.stage3, &cfg.sglp, &cfg.reward, &cfg.optim, cfg.caps, flags,
                cfg.seed, &mut metrics,
            )?)
        }
    };
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &store, &Manifest::new(stage, cfg.seed, &config_text))?;
    let mpath = args.out.join(METRICS_FILE);
    metrics.write(&mpath).map_err(io_err(&mpath))?;
    write(&args.out.join(CONFIG_FILE), &config_text)?;
    let run = json!({
        "command": "train",
        "stage": stage,
        "config": args.config,
        "data": args.data,
        "out": args.out,
        "skip_pretrain": args.skip_pretrain,
        "no_focus_reward": args.no_focus_reward,
        "freeze_latent_policy": args.freeze_latent_policy,
        "seed": cfg.seed,
        "config_hash": Manifest::new(stage, cfg.seed, &config_text).hash_hex(),
        "report": report,
    });
    write(&args.out.join(RUN_MANIFEST_FILE), pretty(&run))?;
    Ok(TrainOutcome { stage, report, checkpoint: ckpt })
}

// ---- eval ----

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub checkpoint_stage: u8,
    pub seed: u64,
    pub config_hash: String,
    #[serde(flatten)]
    pub report: EvalReport,
    /// Accuracy of the rule-based solver on the same tasks.
    pub oracle_accuracy: f64,
}

/// Loads a checkpoint and the model it was trained with.
pub fn open_checkpoint(path: &Path) -> Result<(DlrModel, diffcore::ParamStore, Manifest, RunConfig), CommandError> {
    let (store, manifest) = checkpoint::load(path)?;
    let cfg = RunConfig::from_toml(&manifest.config_text)?;
    let model = DlrModel::bind(&cfg.model, &cfg.grounder, &store).map_err(TrainError::from)?;
    Ok((model, store, manifest, cfg))
}

pub fn eval(args: &EvalArgs) -> Result<EvalOutput, CommandError> {
    let (model, store, manifest, cfg) = open_checkpoint(&args.ckpt)?;
    let tasks = load_dataset(&args.data)?;
    let report = evaluate(&model, &store, &tasks, cfg.caps).map_err(TrainError::from)?;
    let oracle_hits = tasks.iter().filter(|t| oracle_solve(&t.image, &t.question).as_deref() == Some(t.answer.as_str())).count();
    let out = EvalOutput {
        checkpoint_stage: manifest.stage,
        seed: manifest.seed,
        config_hash: manifest.hash_hex(),
        report,
        oracle_accuracy: oracle_hits as f64 / tasks.len().max(1) as f64,
    };
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write(&args.out.join(REPORT_FILE), pretty(&out))?;
    Ok(out)
}

// ---- inspect ----

#[derive(Debug, Clone, PartialEq)]
pub struct InspectArgs {
    pub ckpt: PathBuf,
    pub task_id: String,
    pub dump: PathBuf,
}

/// Grayscale P5 image of a distribution over a `side` x `side` grid,
/// min-max scaled to 0..=255. A constant map renders black.
pub fn pgm(values: &[f64], side: usize) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectOutput {
    pub files: Vec<PathBuf>,
    pub trajectory: String,
}

pub fn inspect(args: &InspectArgs) -> Result<InspectOutput, CommandError> {
    let (model, store, _, cfg) = open_checkpoint(&args.ckpt)?;
    let (family, grid, seed) = parse_task_id(&args.task_id)?;
    let task = generate_task(seed, family, grid)?;
    let r = run_task(&model, &store, &task, cfg.caps).map_err(TrainError::from)?;
    fs::create_dir_all(&args.dump).map_err(io_err(&args.dump))?;
    let mut files = Vec::new();
    let uniform = vec![1.0 / task.image.patches() as f64; task.image.patches()];
    for (k, step) in r.generation.steps.iter().enumerate() {
        let oracle = task.oracle_masks.get(k).unwrap_or(&uniform);
        for (name, map) in [("latent", &step.attn), ("oracle", oracle)] {
            let path = args.dump.join(format!("step{}_{name}.pgm", k + 1));
            write(&path, pgm(map, grid))?;
            files.push(path);
        }
    }
    let text = model.vocab.decode(&r.generation.tokens);
    let body = format!(
        "task: {}\nquestion: {}\ngold: {}\ncorrect: {}\nformat_valid: {}\nmean_kl: {:.6}\n\n{}\n",
        task.id, task.question, task.answer, r.correct, r.valid, r.kl, text
    );
    let tpath = args.dump.join(TRAJECTORY_FILE);
    write(&tpath, &body)?;
    files.push(tpath);
    let ipath = args.dump.join("image.ppm");
    write(&ipath, task.image.to_ppm())?;
    files.push(ipath);
    Ok(InspectOutput { files, trajectory: text })
}

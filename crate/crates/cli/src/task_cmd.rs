//! `finetune` and `frozen`: grid-protocol task runs from a checkpoint.

use std::path::{Path, PathBuf};

use serde::Serialize;

use deskbert_core::encoder::EncoderModel;
use deskbert_core::tasks::{
    casing_note, ConfigReport, FinetuneRunner, FrozenRunner, SplitPaths, TaskKind, TaskSplits,
    FROZEN_BATCH, FROZEN_LR, FROZEN_PATIENCE,
};
use deskbert_core::tensor::Scalar;
use deskbert_core::trainer::{run_grid, GridSpec};
use deskbert_core::vocab::load_vocab;

use crate::settings::Precision;
use crate::{ensure_out_dir, print_json, require_file, write_json, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GridPreset {
    /// 2-5 epochs crossed with four learning rates
    Default,
    /// 2 or 4 epochs at a single learning rate
    Fast,
}

impl GridPreset {
    pub fn spec(self) -> GridSpec {
        match self {
            GridPreset::Default => GridSpec::default_finetune(),
            GridPreset::Fast => GridSpec::fast(),
        }
    }
}

pub fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse::<TaskKind>().map_err(|e| e.to_string())
}

/// Flags shared by `finetune` and `frozen`.
#[derive(Debug, clap::Args)]
pub struct TaskArgs {
    /// One of: ner, pico, cls, rel, dep
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    /// Pretraining checkpoint directory (or a bare encoder directory)
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary file matching the checkpoint
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated training seeds; test scores are averaged across them
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Directory for report.json and the resolved config
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: TaskArgs,
    #[arg(long, value_enum, default_value_t = GridPreset::Default)]
    pub grid: GridPreset,
}

#[derive(Debug, clap::Args)]
pub struct FrozenArgs {
    #[command(flatten)]
    pub common: TaskArgs,
    /// Epoch cap; early stopping with fixed patience usually ends sooner
    #[arg(long, default_value_t = 100)]
    pub max_epochs: u32,
}

#[derive(Serialize)]
struct ResolvedTaskConfig {
    command: String,
    task: String,
    ckpt: String,
    vocab: String,
    train: String,
    dev: String,
    test: String,
    grid: Vec<ConfigReport>,
    seeds: Vec<u64>,
    precision: Precision,
}

pub fn finetune(args: &FinetuneArgs) -> Result<(), CliError> {
    match args.common.precision {
        Precision::F32 => run_finetune::<f32>(args),
        Precision::F64 => run_finetune::<f64>(args),
    }
}

pub fn frozen(args: &FrozenArgs) -> Result<(), CliError> {
    match args.common.precision {
        Precision::F32 => run_frozen::<f32>(args),
        Precision::F64 => run_frozen::<f64>(args),
    }
}

fn check_inputs(c: &TaskArgs) -> Result<(), CliError> {
    if !c.ckpt.is_dir() {
        return Err(CliError::config(format!(
            "checkpoint directory not found: {}",
            c.ckpt.display()
        )));
    }
    require_file(&c.vocab, "vocabulary")?;
    require_file(&c.train, "train split")?;
    require_file(&c.dev, "dev split")?;
    require_file(&c.test, "test split")?;
    Ok(())
}

/// Accepts either a pretraining checkpoint (encoder in a subdirectory) or a
/// directory holding the encoder files themselves.
fn load_encoder<T: Scalar>(path: &Path) -> Result<EncoderModel<T>, CliError> {
    let nested = path.join("encoder");
    let dir = if nested.is_dir() { nested } else { path.to_path_buf() };
    EncoderModel::load(&dir)
        .map_err(|e| CliError::Runtime(format!("loading checkpoint {}: {}", dir.display(), e)))
}

fn split_paths(c: &TaskArgs) -> SplitPaths {
    SplitPaths {
        train: c.train.display().to_string(),
        dev: c.dev.display().to_string(),
        test: c.test.display().to_string(),
    }
}

fn resolved(c: &TaskArgs, command: &str, spec: &GridSpec) -> ResolvedTaskConfig {
    ResolvedTaskConfig {
        command: command.to_string(),
        task: c.task.name().to_string(),
        ckpt: c.ckpt.display().to_string(),
        vocab: c.vocab.display().to_string(),
        train: c.train.display().to_string(),
        dev: c.dev.display().to_string(),
        test: c.test.display().to_string(),
        grid: spec.points().into_iter().map(ConfigReport::from).collect(),
        seeds: c.seeds.clone(),
        precision: c.precision,
    }
}

fn run_finetune<T: Scalar>(args: &FinetuneArgs) -> Result<(), CliError> {
    let c = &args.common;
    check_inputs(c)?;
    ensure_out_dir(&c.out)?;
    let model = load_encoder::<T>(&c.ckpt)?;
    if let Some(note) = casing_note(c.task, model.config.casing) {
        eprintln!("warning: {}", note);
    }
    let vocab = load_vocab(&c.vocab, model.config.casing).map_err(CliError::runtime)?;
    let splits = TaskSplits::load(c.task, &c.train, &c.dev, &c.test).map_err(CliError::runtime)?;
    let mut runner = FinetuneRunner::new(c.task, model, vocab, splits)
        .map_err(|e| CliError::config(e.to_string()))?;
    let spec = args.grid.spec();
    write_json(&c.out.join("config.json"), &resolved(c, "finetune", &spec))?;
    let outcome = run_grid(&mut runner, &spec, &c.seeds).map_err(CliError::runtime)?;
    let report = runner
        .report(&outcome, &spec.points(), split_paths(c), c.seeds[0])
        .map_err(CliError::runtime)?;
    write_json(&c.out.join("report.json"), &report)?;
    print_json(&report)
}

fn run_frozen<T: Scalar>(args: &FrozenArgs) -> Result<(), CliError> {
    let c = &args.common;
    check_inputs(c)?;
    ensure_out_dir(&c.out)?;
    let model = load_encoder::<T>(&c.ckpt)?;
    if let Some(note) = casing_note(c.task, model.config.casing) {
        eprintln!("warning: {}", note);
    }
    let vocab = load_vocab(&c.vocab, model.config.casing).map_err(CliError::runtime)?;
    let splits = TaskSplits::load(c.task, &c.train, &c.dev, &c.test).map_err(CliError::runtime)?;
    let mut runner = FrozenRunner::new(c.task, model, vocab, splits)
        .map_err(|e| CliError::config(e.to_string()))?;
    eprintln!(
        "frozen protocol: lr {} batch {} patience {}",
        FROZEN_LR, FROZEN_BATCH, FROZEN_PATIENCE
    );
    let spec = GridSpec::single(args.max_epochs, FROZEN_LR, FROZEN_BATCH);
    write_json(&c.out.join("config.json"), &resolved(c, "frozen", &spec))?;
    let outcome = run_grid(&mut runner, &spec, &c.seeds).map_err(CliError::runtime)?;
    let report = runner
        .report(&outcome, &spec.points(), split_paths(c), c.seeds[0])
        .map_err(CliError::runtime)?;
    write_json(&c.out.join("report.json"), &report)?;
    print_json(&report)
}

//! `pretrain`: the two-phase curriculum with step-level checkpointing.
//!
//! Checkpoints land in `<out>/checkpoints/step-NNNNNNNN` every
//! `checkpoint_every` steps, at the phase boundary, and at the end of every
//! invocation; a rerun with the same `--out` resumes from the newest one.
//! The loss log is JSONL at `<out>/log.jsonl` and survives resumption: on
//! restart it is truncated back to the checkpoint actually resumed from, so
//! an interrupted run replays into the same file an uninterrupted run writes.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use deskbert_core::ablation::tokenize_documents;
use deskbert_core::corpus::read_all_documents;
use deskbert_core::encoder::init_params;
use deskbert_core::pretrain::{LogEntry, Pretrainer};
use deskbert_core::tensor::Scalar;
use deskbert_core::util::derive_seed;
use deskbert_core::vocab::load_vocab;

use crate::settings::{settings_diff, Precision, PretrainOverrides, PretrainSettings};
use crate::{ensure_out_dir, print_json, require_file, write_json, CliError};

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    /// JSONL corpus, one document per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file, one token per line
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON settings file; the flags below override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints, log, and resolved config
    #[arg(long)]
    pub out: PathBuf,
    /// Stop this invocation after N optimizer steps; rerun to continue
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[command(flatten)]
    pub overrides: PretrainOverrides,
}

#[derive(Serialize)]
struct PretrainSummary {
    steps_done: u64,
    total_steps: u64,
    phase: u8,
    phase_switch_step: Option<u64>,
    done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_mlm_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_nsp_loss: Option<f64>,
    checkpoint_dir: String,
}

pub fn pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    require_file(&args.corpus, "corpus")?;
    require_file(&args.vocab, "vocabulary")?;
    let mut settings = match &args.config {
        Some(path) => PretrainSettings::load(path)?,
        None => PretrainSettings::default(),
    };
    settings.apply(&args.overrides);
    settings.validate()?;
    match settings.precision {
        Precision::F32 => run::<f32>(args, settings),
        Precision::F64 => run::<f64>(args, settings),
    }
}

fn run<T: Scalar>(args: &PretrainArgs, settings: PretrainSettings) -> Result<(), CliError> {
    let vocab = load_vocab(&args.vocab, settings.casing).map_err(CliError::runtime)?;
    let docs = read_all_documents(&args.corpus).map_err(CliError::runtime)?;
    let tokenized = tokenize_documents(&vocab, &docs);
    ensure_out_dir(&args.out)?;
    let ckpt_root = args.out.join("checkpoints");
    let config_path = args.out.join("config.json");

    let mut session = match latest_checkpoint(&ckpt_root)? {
        Some((step, dir)) => {
            let stored = PretrainSettings::load(&config_path)?;
            let diffs = settings_diff(&stored, &settings);
            if !diffs.is_empty() {
                return Err(CliError::config(format!(
                    "cannot resume {}: config differs from the original run on: {}",
                    args.out.display(),
                    diffs.join(", ")
                )));
            }
            eprintln!("resuming from checkpoint at step {}", step);
            Pretrainer::<T>::load(&dir).map_err(CliError::runtime)?
        }
        None => {
            write_json(&config_path, &settings)?;
            let (encoder_cfg, pretrain_cfg) = settings.to_core(vocab.len());
            let model = init_params::<T>(&encoder_cfg, derive_seed(settings.seed, "pretrain.init"))
                .map_err(CliError::runtime)?;
            Pretrainer::new(model, pretrain_cfg).map_err(CliError::runtime)?
        }
    };
    if session.model.config.vocab_size != vocab.len() {
        return Err(CliError::config(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            session.model.config.vocab_size
        )));
    }

    let log_path = args.out.join("log.jsonl");
    truncate_log(&log_path, session.steps_done())?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::Runtime(format!("opening {}: {}", log_path.display(), e)))?;

    let budget = args.stop_after.unwrap_or(u64::MAX);
    let mut steps_this_run = 0u64;
    let mut saved_at = session.steps_done();
    let mut last: Option<LogEntry> = None;
    while !session.is_done() && steps_this_run < budget {
        let phase_before = session.phase();
        let entries = session.run(&tokenized, 1).map_err(CliError::runtime)?;
        for e in &entries {
            let line = serde_json::to_string(e).map_err(CliError::runtime)?;
            writeln!(log, "{}", line)
                .map_err(|e| CliError::Runtime(format!("writing log: {}", e)))?;
        }
        last = entries.into_iter().next_back().or(last);
        steps_this_run += 1;
        let step = session.steps_done();
        let boundary = session.phase() != phase_before;
        if boundary
            || step % settings.checkpoint_every == 0
            || session.is_done()
            || steps_this_run == budget
        {
            save_checkpoint(&session, &ckpt_root, step)?;
            log.flush().map_err(CliError::runtime)?;
            saved_at = step;
            let e = last.as_ref().expect("at least one step ran");
            eprintln!(
                "step {}/{} phase {} mlm {:.4} nsp {:.4}{}",
                step,
                settings.total_steps,
                session.phase(),
                e.mlm_loss,
                e.nsp_loss,
                if boundary { " (phase switch)" } else { "" }
            );
        }
    }
    if session.steps_done() > saved_at || latest_checkpoint(&ckpt_root)?.is_none() {
        save_checkpoint(&session, &ckpt_root, session.steps_done())?;
    }
    log.flush().map_err(CliError::runtime)?;

    print_json(&PretrainSummary {
        steps_done: session.steps_done(),
        total_steps: settings.total_steps,
        phase: session.phase(),
        phase_switch_step: session.phase_switch_step(),
        done: session.is_done(),
        final_mlm_loss: last.as_ref().map(|e| e.mlm_loss),
        final_nsp_loss: last.as_ref().map(|e| e.nsp_loss),
        checkpoint_dir: checkpoint_dir(&ckpt_root, session.steps_done())
            .display()
            .to_string(),
    })
}

fn checkpoint_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{:08}", step))
}

fn save_checkpoint<T: Scalar>(
    session: &Pretrainer<T>,
    root: &Path,
    step: u64,
) -> Result<(), CliError> {
    let dir = checkpoint_dir(root, step);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {}", dir.display(), e)))?;
    session.save(&dir).map_err(CliError::runtime)
}

/// Newest complete checkpoint under `root`, by step number.
fn latest_checkpoint(root: &Path) -> Result<Option<(u64, PathBuf)>, CliError> {
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root).map_err(CliError::runtime)? {
        let entry = entry.map_err(CliError::runtime)?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        let path = entry.path();
        if !path.join("state.json").is_file() {
            continue;
        }
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best)
}

/// Drops log entries past `upto`, plus any torn trailing line from a killed
/// writer, so the resumed run appends exactly where the checkpoint left off.
fn truncate_log(path: &Path, upto: u64) -> Result<(), CliError> {
    if !path.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(CliError::runtime)?;
    let mut kept = String::new();
    for line in text.lines() {
        match serde_json::from_str::<LogEntry>(line) {
            Ok(e) if e.step <= upto => {
                kept.push_str(line);
                kept.push('\n');
            }
            _ => break,
        }
    }
    if kept.len() != text.len() {
        fs::write(path, kept).map_err(CliError::runtime)?;
    }
    Ok(())
}

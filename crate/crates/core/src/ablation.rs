//! Vocabulary ablation: pretrain twin encoders that differ only in their
//! vocabulary, finetune both on the same task suite, and report paired
//! per-task deltas with seed-level standard errors.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{init_params, EncoderConfig, EncoderModel};
use crate::pretrain::{run_curriculum, PretrainConfig, TokenizedDoc};
use crate::tasks::{ConfigReport, FinetuneRunner, SplitPaths, TaskError, TaskKind, TaskSplits};
use crate::tensor::Scalar;
use crate::trainer::{run_grid, GridSpec};
use crate::util::derive_seed;
use crate::vocab::{tokenize, vocab_overlap, OverlapReport, Vocabulary};

/// Sentence-split and tokenize a document set under one vocabulary.
/// Documents with no usable sentences are dropped.
pub fn tokenize_documents(vocab: &Vocabulary, docs: &[Document]) -> Vec<TokenizedDoc> {
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        let mut sentences = Vec::new();
        for s in doc.sentences().sentences {
            let ids = tokenize(vocab, &s).token_ids;
            if !ids.is_empty() {
                sentences.push(ids);
            }
        }
        if !sentences.is_empty() {
            out.push(sentences);
        }
    }
    out
}

/// One downstream task in the ablation suite.
pub struct AblationTask {
    pub name: String,
    pub kind: TaskKind,
    pub splits: TaskSplits,
    pub paths: SplitPaths,
}

/// Shared experiment settings. The encoder config's vocab_size and casing
/// are overridden per arm from that arm's vocabulary.
pub struct AblationSettings {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub grid: GridSpec,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub kind: String,
    pub metric: String,
    pub selected_a: ConfigReport,
    pub selected_b: ConfigReport,
    pub per_seed_a: Vec<f64>,
    pub per_seed_b: Vec<f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    pub stderr: f64,
}

impl TaskDelta {
    /// Whether the mean delta sits within two standard errors of zero.
    pub fn within_noise(&self) -> bool {
        self.mean_delta.abs() < 2.0 * self.stderr
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub vocab_a: String,
    pub vocab_b: String,
    pub overlap: OverlapReport,
    pub seeds: Vec<u64>,
    pub pretrain_steps: u64,
    pub tasks: Vec<TaskDelta>,
}

fn pretrain_arm<T: Scalar>(
    docs: &[Document],
    vocab: &Vocabulary,
    settings: &AblationSettings,
) -> Result<EncoderModel<T>, TaskError> {
    let mut config = settings.encoder.clone();
    config.vocab_size = vocab.len();
    config.casing = vocab.casing();
    let model = init_params::<T>(&config, derive_seed(settings.pretrain.seed, "ablation.init"))?;
    let tokenized = tokenize_documents(vocab, docs);
    let (session, _log) = run_curriculum(model, &tokenized, settings.pretrain.clone())?;
    Ok(session.model)
}

fn arm_scores<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocabulary,
    task: &AblationTask,
    grid: &GridSpec,
    seeds: &[u64],
) -> Result<(ConfigReport, Vec<f64>), TaskError> {
    let copy = EncoderModel {
        config: model.config.clone(),
        params: model.params.deep_clone(),
    };
    let mut runner = FinetuneRunner::new(task.kind, copy, vocab.clone(), task.splits.clone())?;
    let outcome = run_grid(&mut runner, grid, seeds)?;
    Ok((outcome.point.into(), outcome.test_scores))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn stderr_of(deltas: &[f64], center: f64) -> f64 {
    let var = deltas.iter().map(|d| (d - center).powi(2)).sum::<f64>() / (deltas.len() - 1) as f64;
    (var / deltas.len() as f64).sqrt()
}

/// Runs the full paired experiment: one pretraining per arm on the shared
/// corpus, then every suite task finetuned from both checkpoints. Each arm
/// finetunes with its own derived seeds, so per-seed deltas carry genuine
/// run-to-run noise; with identical vocabularies they scatter around zero
/// instead of vanishing identically.
pub fn run_ablation<T: Scalar>(
    docs: &[Document],
    vocab_a: &Vocabulary,
    name_a: &str,
    vocab_b: &Vocabulary,
    name_b: &str,
    settings: &AblationSettings,
    suite: &[AblationTask],
) -> Result<AblationReport, TaskError> {
    if settings.seeds.len() < 2 {
        return Err(TaskError::Input(
            "paired deltas need at least two seeds".to_string(),
        ));
    }
    if suite.is_empty() {
        return Err(TaskError::Input("task suite is empty".to_string()));
    }
    let model_a = pretrain_arm::<T>(docs, vocab_a, settings)?;
    let model_b = pretrain_arm::<T>(docs, vocab_b, settings)?;
    let seeds_a: Vec<u64> = settings.seeds.iter().map(|&s| derive_seed(s, "ablation.arm-a")).collect();
    let seeds_b: Vec<u64> = settings.seeds.iter().map(|&s| derive_seed(s, "ablation.arm-b")).collect();
    let mut tasks = Vec::with_capacity(suite.len());
    for task in suite {
        let (selected_a, per_seed_a) = arm_scores(&model_a, vocab_a, task, &settings.grid, &seeds_a)?;
        let (selected_b, per_seed_b) = arm_scores(&model_b, vocab_b, task, &settings.grid, &seeds_b)?;
        let deltas: Vec<f64> = per_seed_a
            .iter()
            .zip(&per_seed_b)
            .map(|(a, b)| a - b)
            .collect();
        let mean_delta = mean(&deltas);
        let stderr = stderr_of(&deltas, mean_delta);
        tasks.push(TaskDelta {
            task: task.name.clone(),
            kind: task.kind.name().to_string(),
            metric: task.kind.metric_name().to_string(),
            selected_a,
            selected_b,
            mean_a: mean(&per_seed_a),
            mean_b: mean(&per_seed_b),
            per_seed_a,
            per_seed_b,
            deltas,
            mean_delta,
            stderr,
        });
    }
    Ok(AblationReport {
        vocab_a: name_a.to_string(),
        vocab_b: name_b.to_string(),
        overlap: vocab_overlap(vocab_a, vocab_b),
        seeds: settings.seeds.clone(),
        pretrain_steps: settings.pretrain.total_steps,
        tasks,
    })
}

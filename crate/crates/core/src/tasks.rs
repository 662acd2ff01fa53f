//! Downstream task plumbing: dataset loading, label inventories, prediction
//! and scoring for each task family, and the runners that plug finetuning or
//! frozen-feature training into the grid-search protocol.

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    read_cls, read_dep, read_rel, read_tagging, ClassificationDataset, DatasetError, DepDataset,
    DependencyTree, LabelScheme, LabelSet, RelationDataset, RelationExample, TaggingDataset,
};
use crate::encoder::{EncoderConfig, EncoderError, EncoderModel};
use crate::frozen::{
    CachePolicy, FrozenClassifier, FrozenEmbedder, FrozenParser, FrozenTagger, LSTM_HIDDEN,
    LSTM_LAYERS, MLP_HIDDEN,
};
use crate::heads::{
    classify_cls, cls_logits, init_cls_head, init_tag_head, mark_entities, parse_biaffine,
    parse_loss, tag_loss, tag_sequence, words_to_ids, BiaffineParams, CrfParams, HeadError,
    ARC_DIM,
};
use crate::metrics::{
    attachment_scores, bootstrap_ci, sentence_f1, span_f1_macro, spans_from_bio, token_f1_macro,
    F1Mode, MetricError, MetricResult, Span,
};
use crate::tensor::{ops, params_checksum, ParamSet, Scalar, Tape};
use crate::trainer::{
    early_stop_loop, lr_at, Adam, GridOutcome, GridPoint, TaskRunner, TrainError, TrialReport,
};
use crate::util::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::vocab::{Casing, Vocabulary};

/// Dropout used when the whole encoder is finetuned.
pub const FINETUNE_DROPOUT: f64 = 0.1;
/// Fraction of total steps spent in linear warmup before the linear decay.
pub const FINETUNE_WARMUP: f64 = 0.1;
/// Fixed optimizer settings for the frozen-embedding protocol.
pub const FROZEN_LR: f64 = 1e-3;
pub const FROZEN_BATCH: usize = 32;
pub const FROZEN_PATIENCE: u32 = 10;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pretrain(#[from] crate::pretrain::PretrainError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<TaskError> for TrainError {
    fn from(e: TaskError) -> TrainError {
        match e {
            TaskError::Train(inner) => inner,
            other => TrainError::Invalid(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Ner,
    Pico,
    Cls,
    Rel,
    Dep,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Ner,
        TaskKind::Pico,
        TaskKind::Cls,
        TaskKind::Rel,
        TaskKind::Dep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Ner => "ner",
            TaskKind::Pico => "pico",
            TaskKind::Cls => "cls",
            TaskKind::Rel => "rel",
            TaskKind::Dep => "dep",
        }
    }

    /// Casing convention: entity and syntax tasks keep case, the rest fold.
    pub fn expected_casing(self) -> Casing {
        match self {
            TaskKind::Ner | TaskKind::Dep => Casing::Cased,
            _ => Casing::Uncased,
        }
    }

    /// Name of the selection metric.
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Ner => "span_f1",
            TaskKind::Pico => "token_f1",
            TaskKind::Cls | TaskKind::Rel => "macro_f1",
            TaskKind::Dep => "las",
        }
    }

    /// Resampling unit for bootstrap intervals.
    pub fn bootstrap_unit(self) -> &'static str {
        "sentence"
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s {
            "ner" => Ok(TaskKind::Ner),
            "pico" => Ok(TaskKind::Pico),
            "cls" => Ok(TaskKind::Cls),
            "rel" => Ok(TaskKind::Rel),
            "dep" => Ok(TaskKind::Dep),
            other => Err(TaskError::Input(format!(
                "unknown task {:?}; expected ner, pico, cls, rel, or dep",
                other
            ))),
        }
    }
}

/// Warning text when a checkpoint's casing does not match the task
/// convention; None when it does.
pub fn casing_note(kind: TaskKind, checkpoint: Casing) -> Option<String> {
    let expected = kind.expected_casing();
    if checkpoint == expected {
        None
    } else {
        Some(format!(
            "task {} conventionally uses a {:?} checkpoint, got {:?}",
            kind.name(),
            expected,
            checkpoint
        ))
    }
}

#[derive(Debug, Clone)]
pub enum TaskData {
    Tagging(TaggingDataset),
    Text(ClassificationDataset),
    Relations(RelationDataset),
    Trees(DepDataset),
}

impl TaskData {
    pub fn load(kind: TaskKind, path: &Path) -> Result<TaskData, TaskError> {
        Ok(match kind {
            TaskKind::Ner | TaskKind::Pico => TaskData::Tagging(read_tagging(path)?),
            TaskKind::Cls => TaskData::Text(read_cls(path)?),
            TaskKind::Rel => TaskData::Relations(read_rel(path)?),
            TaskKind::Dep => TaskData::Trees(read_dep(path)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            TaskData::Tagging(d) => d.sentences.len(),
            TaskData::Text(d) => d.examples.len(),
            TaskData::Relations(d) => d.examples.len(),
            TaskData::Trees(d) => d.sentences.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tagging(&self) -> Option<&TaggingDataset> {
        match self {
            TaskData::Tagging(d) => Some(d),
            _ => None,
        }
    }

    pub fn texts(&self) -> Option<&ClassificationDataset> {
        match self {
            TaskData::Text(d) => Some(d),
            _ => None,
        }
    }

    pub fn relations(&self) -> Option<&RelationDataset> {
        match self {
            TaskData::Relations(d) => Some(d),
            _ => None,
        }
    }

    pub fn trees(&self) -> Option<&DepDataset> {
        match self {
            TaskData::Trees(d) => Some(d),
            _ => None,
        }
    }

    fn as_tagging(&self) -> Result<&TaggingDataset, TaskError> {
        match self {
            TaskData::Tagging(d) => Ok(d),
            _ => Err(TaskError::Input("expected tagged sentences".to_string())),
        }
    }

    fn as_text(&self) -> Result<&ClassificationDataset, TaskError> {
        match self {
            TaskData::Text(d) => Ok(d),
            _ => Err(TaskError::Input("expected labeled texts".to_string())),
        }
    }

    fn as_relations(&self) -> Result<&RelationDataset, TaskError> {
        match self {
            TaskData::Relations(d) => Ok(d),
            _ => Err(TaskError::Input("expected relation examples".to_string())),
        }
    }

    fn as_trees(&self) -> Result<&DepDataset, TaskError> {
        match self {
            TaskData::Trees(d) => Ok(d),
            _ => Err(TaskError::Input("expected dependency trees".to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSplits {
    pub train: TaskData,
    pub dev: TaskData,
    pub test: TaskData,
}

impl TaskSplits {
    pub fn load(kind: TaskKind, train: &Path, dev: &Path, test: &Path) -> Result<Self, TaskError> {
        let splits = TaskSplits {
            train: TaskData::load(kind, train)?,
            dev: TaskData::load(kind, dev)?,
            test: TaskData::load(kind, test)?,
        };
        for (name, d) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
            if d.is_empty() {
                return Err(TaskError::Input(format!("{} split is empty", name)));
            }
        }
        Ok(splits)
    }
}

/// Label inventory over every split, so dev/test labels are always encodable.
/// Tagging tasks get a BIO-constrained set when all tags fit the scheme and a
/// plain set otherwise; other tasks get sorted plain labels.
pub fn observed_labels(kind: TaskKind, splits: &TaskSplits) -> Result<LabelSet, TaskError> {
    labels_from(kind, &[&splits.train, &splits.dev, &splits.test])
}

/// Label inventory for metric-only evaluation, covering gold and predictions.
pub fn eval_labels(kind: TaskKind, gold: &TaskData, pred: &TaskData) -> Result<LabelSet, TaskError> {
    labels_from(kind, &[gold, pred])
}

fn labels_from(kind: TaskKind, sources: &[&TaskData]) -> Result<LabelSet, TaskError> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    match kind {
        TaskKind::Ner | TaskKind::Pico => {
            for data in sources {
                for s in &data.as_tagging()?.sentences {
                    seen.extend(s.tags.iter().cloned());
                }
            }
            let bio_shaped = seen
                .iter()
                .all(|t| t == "O" || t.starts_with("B-") || t.starts_with("I-"));
            let refs: Vec<&str> = seen.iter().map(String::as_str).collect();
            if bio_shaped {
                Ok(LabelSet::bio_from_observed(refs)?)
            } else {
                Ok(LabelSet::plain_from_observed(refs)?)
            }
        }
        TaskKind::Cls => {
            for data in sources {
                seen.extend(data.as_text()?.examples.iter().map(|e| e.label.clone()));
            }
            let refs: Vec<&str> = seen.iter().map(String::as_str).collect();
            Ok(LabelSet::plain_from_observed(refs)?)
        }
        TaskKind::Rel => {
            for data in sources {
                seen.extend(data.as_relations()?.examples.iter().map(|e| e.label.clone()));
            }
            let refs: Vec<&str> = seen.iter().map(String::as_str).collect();
            Ok(LabelSet::plain_from_observed(refs)?)
        }
        TaskKind::Dep => {
            for data in sources {
                for t in &data.as_trees()?.sentences {
                    seen.extend(t.labels.iter().cloned());
                }
            }
            let refs: Vec<&str> = seen.iter().map(String::as_str).collect();
            Ok(LabelSet::plain_from_observed(refs)?)
        }
    }
}

fn label_index(labels: &LabelSet, label: &str) -> Result<usize, TaskError> {
    labels
        .index_of(label)
        .ok_or_else(|| TaskError::Input(format!("label {:?} missing from inventory", label)))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A finetuned encoder plus its task head, ready for inference.
pub struct TunedModel<T: Scalar> {
    pub kind: TaskKind,
    pub config: EncoderConfig,
    pub encoder: ParamSet<T>,
    pub head: ParamSet<T>,
    pub crf: Option<CrfParams<T>>,
    pub biaffine: Option<BiaffineParams<T>>,
    pub labels: LabelSet,
}

impl<T: Scalar> TunedModel<T> {
    pub fn predict_tags(&self, vocab: &Vocabulary, words: &[String]) -> Result<Vec<String>, TaskError> {
        let crf = self
            .crf
            .as_ref()
            .ok_or_else(|| TaskError::Input("model has no tagging head".to_string()))?;
        Ok(tag_sequence(&self.config, &self.encoder, &self.head, crf, vocab, words, &self.labels)?)
    }

    pub fn predict_class(&self, vocab: &Vocabulary, text: &str) -> Result<String, TaskError> {
        let probs = classify_cls(&self.config, &self.encoder, &self.head, vocab, text)?;
        Ok(self.labels.label(argmax(&probs)).to_string())
    }

    pub fn predict_relation(
        &self,
        vocab: &Vocabulary,
        example: &RelationExample,
    ) -> Result<String, TaskError> {
        let marked = mark_entities(&example.tokens, example.e1, example.e2)?;
        let (ids, _) = words_to_ids(vocab, &marked, self.config.max_positions)?;
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let logits = cls_logits(
            &self.config,
            &self.encoder,
            &self.head,
            &tape,
            &[ids],
            false,
            &mut rng,
        )?;
        let row: Vec<f64> = logits.to_vec().iter().map(|v| v.to_f64()).collect();
        Ok(self.labels.label(argmax(&row)).to_string())
    }

    pub fn predict_tree(
        &self,
        vocab: &Vocabulary,
        sentence: &DependencyTree,
    ) -> Result<DependencyTree, TaskError> {
        let bi = self
            .biaffine
            .as_ref()
            .ok_or_else(|| TaskError::Input("model has no parsing head".to_string()))?;
        Ok(parse_biaffine(
            &self.config,
            &self.encoder,
            bi,
            vocab,
            &sentence.tokens,
            &sentence.is_punct,
            &self.labels,
        )?)
    }
}

/// Model outputs over a whole split, in the split's order.
#[derive(Debug, Clone)]
pub enum Predictions {
    TagSeqs(Vec<Vec<String>>),
    Classes(Vec<String>),
    Trees(Vec<DependencyTree>),
}

impl Predictions {
    /// Reads a prediction file of the same format as the gold data.
    pub fn from_data(kind: TaskKind, data: &TaskData) -> Result<Predictions, TaskError> {
        Ok(match kind {
            TaskKind::Ner | TaskKind::Pico => Predictions::TagSeqs(
                data.as_tagging()?.sentences.iter().map(|s| s.tags.clone()).collect(),
            ),
            TaskKind::Cls => Predictions::Classes(
                data.as_text()?.examples.iter().map(|e| e.label.clone()).collect(),
            ),
            TaskKind::Rel => Predictions::Classes(
                data.as_relations()?.examples.iter().map(|e| e.label.clone()).collect(),
            ),
            TaskKind::Dep => Predictions::Trees(data.as_trees()?.sentences.clone()),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Predictions::TagSeqs(v) => v.len(),
            Predictions::Classes(v) => v.len(),
            Predictions::Trees(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_tag_seqs(&self) -> Result<&[Vec<String>], TaskError> {
        match self {
            Predictions::TagSeqs(v) => Ok(v),
            _ => Err(TaskError::Input("expected tag sequences".to_string())),
        }
    }

    fn as_classes(&self) -> Result<&[String], TaskError> {
        match self {
            Predictions::Classes(v) => Ok(v),
            _ => Err(TaskError::Input("expected class labels".to_string())),
        }
    }

    fn as_trees(&self) -> Result<&[DependencyTree], TaskError> {
        match self {
            Predictions::Trees(v) => Ok(v),
            _ => Err(TaskError::Input("expected dependency trees".to_string())),
        }
    }
}

pub fn predict_all_tuned<T: Scalar>(
    model: &TunedModel<T>,
    vocab: &Vocabulary,
    data: &TaskData,
) -> Result<Predictions, TaskError> {
    Ok(match model.kind {
        TaskKind::Ner | TaskKind::Pico => {
            let mut out = Vec::new();
            for s in &data.as_tagging()?.sentences {
                out.push(model.predict_tags(vocab, &s.tokens)?);
            }
            Predictions::TagSeqs(out)
        }
        TaskKind::Cls => {
            let mut out = Vec::new();
            for e in &data.as_text()?.examples {
                out.push(model.predict_class(vocab, &e.text)?);
            }
            Predictions::Classes(out)
        }
        TaskKind::Rel => {
            let mut out = Vec::new();
            for e in &data.as_relations()?.examples {
                out.push(model.predict_relation(vocab, e)?);
            }
            Predictions::Classes(out)
        }
        TaskKind::Dep => {
            let mut out = Vec::new();
            for t in &data.as_trees()?.sentences {
                out.push(model.predict_tree(vocab, t)?);
            }
            Predictions::Trees(out)
        }
    })
}

fn gold_span_sets(data: &TaggingDataset) -> Result<Vec<Vec<Span>>, TaskError> {
    data.sentences
        .iter()
        .map(|s| Ok(spans_from_bio(&s.tags)?.0))
        .collect()
}

fn pred_span_sets(seqs: &[Vec<String>]) -> Result<Vec<Vec<Span>>, TaskError> {
    seqs.iter().map(|s| Ok(spans_from_bio(s)?.0)).collect()
}

/// Scores predictions against the gold split with the task's metric.
pub fn score_predictions(
    kind: TaskKind,
    labels: &LabelSet,
    gold: &TaskData,
    preds: &Predictions,
) -> Result<MetricResult, TaskError> {
    match kind {
        TaskKind::Ner => {
            let g = gold_span_sets(gold.as_tagging()?)?;
            let p = pred_span_sets(preds.as_tag_seqs()?)?;
            Ok(span_f1_macro(&g, &p)?)
        }
        TaskKind::Pico => {
            let g: Vec<Vec<String>> =
                gold.as_tagging()?.sentences.iter().map(|s| s.tags.clone()).collect();
            Ok(token_f1_macro(&g, preds.as_tag_seqs()?)?)
        }
        TaskKind::Cls | TaskKind::Rel => {
            let g: Vec<String> = match kind {
                TaskKind::Cls => gold.as_text()?.examples.iter().map(|e| e.label.clone()).collect(),
                _ => gold.as_relations()?.examples.iter().map(|e| e.label.clone()).collect(),
            };
            Ok(sentence_f1(&g, preds.as_classes()?, labels.labels(), F1Mode::Macro)?)
        }
        TaskKind::Dep => {
            let scores = attachment_scores(&gold.as_trees()?.sentences, preds.as_trees()?)?;
            Ok(MetricResult {
                name: "las".to_string(),
                value: scores.las,
                per_class: None,
                ci_low: None,
                ci_high: None,
            })
        }
    }
}

/// Bootstrap confidence interval for the task metric, resampling sentences.
pub fn bootstrap_interval(
    kind: TaskKind,
    labels: &LabelSet,
    gold: &TaskData,
    preds: &Predictions,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), TaskError> {
    match kind {
        TaskKind::Ner => {
            let g = gold_span_sets(gold.as_tagging()?)?;
            let p = pred_span_sets(preds.as_tag_seqs()?)?;
            let f = |g: &[Vec<Span>], p: &[Vec<Span>]| {
                span_f1_macro(g, p).map(|m| m.value).unwrap_or(0.0)
            };
            Ok(bootstrap_ci(f, &g, &p, resamples, level, seed)?)
        }
        TaskKind::Pico => {
            let g: Vec<Vec<String>> =
                gold.as_tagging()?.sentences.iter().map(|s| s.tags.clone()).collect();
            let p = preds.as_tag_seqs()?.to_vec();
            let f = |g: &[Vec<String>], p: &[Vec<String>]| {
                token_f1_macro(g, p).map(|m| m.value).unwrap_or(0.0)
            };
            Ok(bootstrap_ci(f, &g, &p, resamples, level, seed)?)
        }
        TaskKind::Cls | TaskKind::Rel => {
            let g: Vec<String> = match kind {
                TaskKind::Cls => gold.as_text()?.examples.iter().map(|e| e.label.clone()).collect(),
                _ => gold.as_relations()?.examples.iter().map(|e| e.label.clone()).collect(),
            };
            let p = preds.as_classes()?.to_vec();
            let declared = labels.labels().to_vec();
            let f = move |g: &[String], p: &[String]| {
                sentence_f1(g, p, &declared, F1Mode::Macro).map(|m| m.value).unwrap_or(0.0)
            };
            Ok(bootstrap_ci(f, &g, &p, resamples, level, seed)?)
        }
        TaskKind::Dep => {
            let g = gold.as_trees()?.sentences.clone();
            let p = preds.as_trees()?.to_vec();
            let f = |g: &[DependencyTree], p: &[DependencyTree]| {
                attachment_scores(g, p).map(|a| a.las).unwrap_or(0.0)
            };
            Ok(bootstrap_ci(f, &g, &p, resamples, level, seed)?)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigReport {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
}

impl From<GridPoint> for ConfigReport {
    fn from(p: GridPoint) -> ConfigReport {
        ConfigReport {
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialScores {
    pub config: ConfigReport,
    pub dev_scores: Vec<f64>,
    pub mean_dev: f64,
}

impl From<&TrialReport> for TrialScores {
    fn from(t: &TrialReport) -> TrialScores {
        TrialScores {
            config: t.point.into(),
            dev_scores: t.dev_scores.clone(),
            mean_dev: t.mean_dev,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: String,
    pub dev: String,
    pub test: String,
}

/// Full record of one grid-protocol run, serialized next to the outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub mode: String,
    pub metric: String,
    pub dataset: SplitPaths,
    pub grid: Vec<ConfigReport>,
    pub per_config_dev_scores: Vec<TrialScores>,
    pub selected_config: ConfigReport,
    pub per_seed_dev_scores: Vec<f64>,
    pub per_seed_test_scores: Vec<f64>,
    pub mean_dev_score: f64,
    pub mean_test_score: f64,
    pub bootstrap_interval: (f64, f64),
    pub bootstrap_unit: String,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub casing_note: Option<String>,
}

const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_LEVEL: f64 = 0.95;

fn base_report<M>(
    kind: TaskKind,
    mode: &str,
    dataset: SplitPaths,
    grid: &[GridPoint],
    outcome: &GridOutcome<M>,
    interval: (f64, f64),
) -> RunReport {
    RunReport {
        task: kind.name().to_string(),
        mode: mode.to_string(),
        metric: kind.metric_name().to_string(),
        dataset,
        grid: grid.iter().map(|&p| p.into()).collect(),
        per_config_dev_scores: outcome.trials.iter().map(TrialScores::from).collect(),
        selected_config: outcome.point.into(),
        per_seed_dev_scores: outcome.dev_scores.clone(),
        per_seed_test_scores: outcome.test_scores.clone(),
        mean_dev_score: outcome.mean_dev,
        mean_test_score: outcome.mean_test,
        bootstrap_interval: interval,
        bootstrap_unit: kind.bootstrap_unit().to_string(),
        seeds: outcome.seeds.clone(),
        encoder_checksum: None,
        casing_note: None,
    }
}

/// Prepares a checkpoint and vocabulary for a task: relation tasks get the
/// entity markers appended and the embedding table grown to match.
fn adapt_for_task<T: Scalar>(
    kind: TaskKind,
    mut model: EncoderModel<T>,
    mut vocab: Vocabulary,
) -> Result<(EncoderModel<T>, Vocabulary), TaskError> {
    if kind == TaskKind::Rel {
        let extended = vocab.with_entity_markers();
        if extended.len() > vocab.len() {
            model.extend_vocab(extended.len(), derive_seed(0, "entity.markers"))?;
        }
        vocab = extended;
    }
    if vocab.len() != model.config.vocab_size {
        return Err(TaskError::Input(format!(
            "vocabulary has {} entries but checkpoint expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    if vocab.casing() != model.config.casing {
        return Err(TaskError::Input(format!(
            "vocabulary casing {:?} does not match checkpoint casing {:?}",
            vocab.casing(),
            model.config.casing
        )));
    }
    Ok((model, vocab))
}

/// Finetuning runner: every train() call deep-copies the base checkpoint,
/// attaches a fresh head, and optimizes the whole stack under the
/// warmup/decay schedule. Sequences beyond the position budget are an
/// error; split long sentences upstream.
pub struct FinetuneRunner<T: Scalar> {
    kind: TaskKind,
    config: EncoderConfig,
    base: ParamSet<T>,
    vocab: Vocabulary,
    labels: LabelSet,
    splits: TaskSplits,
    pub warmup_fraction: f64,
    lr_trace: RefCell<Vec<f64>>,
    dev_evaluations: Cell<usize>,
    test_evaluations: Cell<usize>,
}

impl<T: Scalar> FinetuneRunner<T> {
    pub fn new(
        kind: TaskKind,
        model: EncoderModel<T>,
        vocab: Vocabulary,
        splits: TaskSplits,
    ) -> Result<Self, TaskError> {
        let labels = observed_labels(kind, &splits)?;
        let (model, vocab) = adapt_for_task(kind, model, vocab)?;
        let mut config = model.config;
        config.dropout = FINETUNE_DROPOUT;
        Ok(FinetuneRunner {
            kind,
            config,
            base: model.params,
            vocab,
            labels,
            splits,
            warmup_fraction: FINETUNE_WARMUP,
            lr_trace: RefCell::new(Vec::new()),
            dev_evaluations: Cell::new(0),
            test_evaluations: Cell::new(0),
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn splits(&self) -> &TaskSplits {
        &self.splits
    }

    /// Learning rate applied at each optimizer step of the latest train().
    pub fn lr_trace(&self) -> Vec<f64> {
        self.lr_trace.borrow().clone()
    }

    pub fn dev_evaluations(&self) -> usize {
        self.dev_evaluations.get()
    }

    pub fn test_evaluations(&self) -> usize {
        self.test_evaluations.get()
    }

    fn init_head(&self, seed: u64) -> Result<(ParamSet<T>, Option<CrfParams<T>>, Option<BiaffineParams<T>>), TaskError> {
        let hidden = self.config.hidden_size;
        Ok(match self.kind {
            TaskKind::Ner | TaskKind::Pico => {
                let (head, crf) = init_tag_head(hidden, &self.labels, seed)?;
                (head, Some(crf), None)
            }
            TaskKind::Cls | TaskKind::Rel => {
                (init_cls_head(hidden, self.labels.len(), seed), None, None)
            }
            TaskKind::Dep => {
                let bi = BiaffineParams::new(hidden, self.labels.len(), seed)?;
                (ParamSet::new(), None, Some(bi))
            }
        })
    }

    fn accumulate_batch(
        &self,
        model: &TunedModel<T>,
        chunk: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TaskError> {
        let weight = 1.0 / chunk.len() as f64;
        match self.kind {
            TaskKind::Ner | TaskKind::Pico => {
                let data = self.splits.train.as_tagging()?;
                let crf = model.crf.as_ref().expect("tagging head present");
                for &i in chunk {
                    let s = &data.sentences[i];
                    let gold: Vec<usize> = s
                        .tags
                        .iter()
                        .map(|t| label_index(&self.labels, t))
                        .collect::<Result<_, _>>()?;
                    let tape = Tape::new();
                    let loss = tag_loss(
                        &self.config,
                        &model.encoder,
                        &model.head,
                        crf,
                        &tape,
                        &self.vocab,
                        &s.tokens,
                        &gold,
                        true,
                        rng,
                    )?;
                    let scaled = ops::scale(&tape, &loss, weight).map_err(HeadError::from)?;
                    tape.backward(&scaled).map_err(HeadError::from)?;
                }
            }
            TaskKind::Cls => {
                let data = self.splits.train.as_text()?;
                let mut rows = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let e = &data.examples[i];
                    rows.push(crate::heads::text_to_ids(&self.vocab, &e.text, self.config.max_positions)?);
                    targets.push(label_index(&self.labels, &e.label)? as u32);
                }
                let tape = Tape::new();
                let logits =
                    cls_logits(&self.config, &model.encoder, &model.head, &tape, &rows, true, rng)?;
                let loss =
                    ops::cross_entropy(&tape, &logits, &targets, None).map_err(HeadError::from)?;
                tape.backward(&loss).map_err(HeadError::from)?;
            }
            TaskKind::Rel => {
                let data = self.splits.train.as_relations()?;
                let mut rows = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let e = &data.examples[i];
                    let marked = mark_entities(&e.tokens, e.e1, e.e2)?;
                    let (ids, _) = words_to_ids(&self.vocab, &marked, self.config.max_positions)?;
                    rows.push(ids);
                    targets.push(label_index(&self.labels, &e.label)? as u32);
                }
                let tape = Tape::new();
                let logits =
                    cls_logits(&self.config, &model.encoder, &model.head, &tape, &rows, true, rng)?;
                let loss =
                    ops::cross_entropy(&tape, &logits, &targets, None).map_err(HeadError::from)?;
                tape.backward(&loss).map_err(HeadError::from)?;
            }
            TaskKind::Dep => {
                let data = self.splits.train.as_trees()?;
                let bi = model.biaffine.as_ref().expect("parsing head present");
                for &i in chunk {
                    let t = &data.sentences[i];
                    let gold_labels: Vec<u32> = t
                        .labels
                        .iter()
                        .map(|l| label_index(&self.labels, l).map(|x| x as u32))
                        .collect::<Result<_, _>>()?;
                    let tape = Tape::new();
                    let loss = parse_loss(
                        &self.config,
                        &model.encoder,
                        bi,
                        &tape,
                        &self.vocab,
                        &t.tokens,
                        &t.heads,
                        &gold_labels,
                        true,
                        rng,
                    )?;
                    let scaled = ops::scale(&tape, &loss, weight).map_err(HeadError::from)?;
                    tape.backward(&scaled).map_err(HeadError::from)?;
                }
            }
        }
        Ok(())
    }

    fn score_split(&self, model: &TunedModel<T>, data: &TaskData) -> Result<f64, TaskError> {
        let preds = predict_all_tuned(model, &self.vocab, data)?;
        Ok(score_predictions(self.kind, &self.labels, data, &preds)?.value)
    }

    /// Report for a finished grid run; the bootstrap interval comes from the
    /// first selected model's test predictions.
    pub fn report(
        &self,
        outcome: &GridOutcome<TunedModel<T>>,
        grid: &[GridPoint],
        dataset: SplitPaths,
        seed: u64,
    ) -> Result<RunReport, TaskError> {
        let preds = predict_all_tuned(&outcome.models[0], &self.vocab, &self.splits.test)?;
        let interval = bootstrap_interval(
            self.kind,
            &self.labels,
            &self.splits.test,
            &preds,
            BOOTSTRAP_RESAMPLES,
            BOOTSTRAP_LEVEL,
            derive_seed(seed, "bootstrap"),
        )?;
        let mut report = base_report(self.kind, "finetune", dataset, grid, outcome, interval);
        report.casing_note = casing_note(self.kind, self.config.casing);
        Ok(report)
    }
}

impl<T: Scalar> TaskRunner for FinetuneRunner<T> {
    type Trained = TunedModel<T>;

    fn train(
        &mut self,
        epochs: u32,
        lr_max: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<TunedModel<T>, TrainError> {
        if epochs == 0 {
            return Err(TrainError::Invalid("zero epochs".to_string()));
        }
        if batch_size == 0 {
            return Err(TrainError::Invalid("zero batch size".to_string()));
        }
        let n = self.splits.train.len();
        let (head, crf, biaffine) = self.init_head(derive_seed(seed, "task.head"))?;
        let model = TunedModel {
            kind: self.kind,
            config: self.config.clone(),
            encoder: self.base.deep_clone(),
            head,
            crf,
            biaffine,
            labels: self.labels.clone(),
        };
        let mut trainable = model.encoder.share();
        for (name, t) in model.head.iter() {
            trainable.insert(name.clone(), t.clone());
        }
        if let Some(bi) = &model.biaffine {
            for (name, t) in bi.params.iter() {
                trainable.insert(name.clone(), t.clone());
            }
        }
        let steps_per_epoch = n.div_ceil(batch_size) as u64;
        let total = epochs as u64 * steps_per_epoch;
        let mut adam = Adam::new();
        let mut rng = rng_from_seed(derive_seed(seed, "task.dropout"));
        self.lr_trace.borrow_mut().clear();
        let mut step = 0u64;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut order_rng = rng_from_seed(derive_seed_indexed(seed, "task.order", epoch as u64));
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(batch_size) {
                step += 1;
                let lr = lr_at(step, total, lr_max, self.warmup_fraction);
                self.lr_trace.borrow_mut().push(lr);
                self.accumulate_batch(&model, chunk, &mut rng)?;
                adam.step(&trainable, lr)?;
            }
        }
        Ok(model)
    }

    fn dev_score(&self, model: &TunedModel<T>) -> Result<f64, TrainError> {
        self.dev_evaluations.set(self.dev_evaluations.get() + 1);
        Ok(self.score_split(model, &self.splits.dev)?)
    }

    fn test_score(&self, model: &TunedModel<T>) -> Result<f64, TrainError> {
        self.test_evaluations.set(self.test_evaluations.get() + 1);
        Ok(self.score_split(model, &self.splits.test)?)
    }
}

/// A trained task model over frozen encoder features.
pub enum FrozenTrained<T: Scalar> {
    Classifier(FrozenClassifier<T>),
    Tagger(FrozenTagger<T>),
    Parser(FrozenParser<T>),
}

pub struct FrozenOutcome<T: Scalar> {
    pub model: FrozenTrained<T>,
    pub best_epoch: u32,
    pub epochs_run: u32,
    pub dev_history: Vec<f64>,
}

/// Frozen-feature runner: the encoder only ever runs in inference mode, and
/// training touches the BiLSTM task model alone. train()'s epoch argument is
/// the early-stopping cap.
pub struct FrozenRunner<T: Scalar> {
    kind: TaskKind,
    embedder: FrozenEmbedder<T>,
    vocab: Vocabulary,
    labels: LabelSet,
    splits: TaskSplits,
    pub patience: u32,
    lstm_hidden: usize,
    lstm_layers: usize,
    mlp_hidden: usize,
    arc_dim: usize,
    dev_evaluations: Cell<usize>,
    test_evaluations: Cell<usize>,
}

impl<T: Scalar> FrozenRunner<T> {
    pub fn new(
        kind: TaskKind,
        model: EncoderModel<T>,
        vocab: Vocabulary,
        splits: TaskSplits,
    ) -> Result<Self, TaskError> {
        Self::with_dims(kind, model, vocab, splits, LSTM_HIDDEN, LSTM_LAYERS, MLP_HIDDEN, ARC_DIM)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_dims(
        kind: TaskKind,
        model: EncoderModel<T>,
        vocab: Vocabulary,
        splits: TaskSplits,
        lstm_hidden: usize,
        lstm_layers: usize,
        mlp_hidden: usize,
        arc_dim: usize,
    ) -> Result<Self, TaskError> {
        let labels = observed_labels(kind, &splits)?;
        let (model, vocab) = adapt_for_task(kind, model, vocab)?;
        let embedder = FrozenEmbedder::new(model.config, model.params, CachePolicy::PerSentence);
        Ok(FrozenRunner {
            kind,
            embedder,
            vocab,
            labels,
            splits,
            patience: FROZEN_PATIENCE,
            lstm_hidden,
            lstm_layers,
            mlp_hidden,
            arc_dim,
            dev_evaluations: Cell::new(0),
            test_evaluations: Cell::new(0),
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn splits(&self) -> &TaskSplits {
        &self.splits
    }

    pub fn embedder(&self) -> &FrozenEmbedder<T> {
        &self.embedder
    }

    /// Checksum recorded when the runner adopted the checkpoint.
    pub fn encoder_checksum(&self) -> &str {
        self.embedder.checksum()
    }

    pub fn dev_evaluations(&self) -> usize {
        self.dev_evaluations.get()
    }

    pub fn test_evaluations(&self) -> usize {
        self.test_evaluations.get()
    }

    fn build_model(&self, seed: u64) -> Result<FrozenTrained<T>, TaskError> {
        let input = self.embedder.config().hidden_size;
        Ok(match self.kind {
            TaskKind::Ner | TaskKind::Pico => FrozenTrained::Tagger(FrozenTagger::with_dims(
                input,
                self.lstm_hidden,
                self.lstm_layers,
                &self.labels,
                seed,
            )?),
            TaskKind::Cls | TaskKind::Rel => FrozenTrained::Classifier(FrozenClassifier::with_dims(
                input,
                self.lstm_hidden,
                self.lstm_layers,
                self.mlp_hidden,
                self.labels.len(),
                seed,
            )?),
            TaskKind::Dep => FrozenTrained::Parser(FrozenParser::with_dims(
                input,
                self.lstm_hidden,
                self.lstm_layers,
                self.arc_dim,
                self.labels.len(),
                seed,
            )?),
        })
    }

    fn example_loss(
        &self,
        model: &FrozenTrained<T>,
        index: usize,
        tape: &Tape<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::tensor::Tensor<T>, TaskError> {
        match model {
            FrozenTrained::Tagger(m) => {
                let s = &self.splits.train.as_tagging()?.sentences[index];
                let gold: Vec<usize> = s
                    .tags
                    .iter()
                    .map(|t| label_index(&self.labels, t))
                    .collect::<Result<_, _>>()?;
                Ok(m.loss(&self.embedder, tape, &self.vocab, &s.tokens, &gold, true, rng)?)
            }
            FrozenTrained::Classifier(m) => match &self.splits.train {
                TaskData::Text(d) => {
                    let e = &d.examples[index];
                    let label = label_index(&self.labels, &e.label)? as u32;
                    Ok(m.loss(&self.embedder, tape, &self.vocab, &e.text, label, true, rng)?)
                }
                TaskData::Relations(d) => {
                    let e = &d.examples[index];
                    let label = label_index(&self.labels, &e.label)? as u32;
                    let marked = mark_entities(&e.tokens, e.e1, e.e2)?;
                    Ok(m.loss_words(&self.embedder, tape, &self.vocab, &marked, label, true, rng)?)
                }
                _ => Err(TaskError::Input("classifier expects texts or relations".to_string())),
            },
            FrozenTrained::Parser(m) => {
                let t = &self.splits.train.as_trees()?.sentences[index];
                let gold_labels: Vec<u32> = t
                    .labels
                    .iter()
                    .map(|l| label_index(&self.labels, l).map(|x| x as u32))
                    .collect::<Result<_, _>>()?;
                Ok(m.loss(
                    &self.embedder,
                    tape,
                    &self.vocab,
                    &t.tokens,
                    &t.heads,
                    &gold_labels,
                    true,
                    rng,
                )?)
            }
        }
    }

    fn predict_all(&self, model: &FrozenTrained<T>, data: &TaskData) -> Result<Predictions, TaskError> {
        Ok(match model {
            FrozenTrained::Tagger(m) => {
                let mut out = Vec::new();
                for s in &data.as_tagging()?.sentences {
                    out.push(m.tag(&self.embedder, &self.vocab, &s.tokens, &self.labels)?);
                }
                Predictions::TagSeqs(out)
            }
            FrozenTrained::Classifier(m) => match data {
                TaskData::Text(d) => {
                    let mut out = Vec::new();
                    for e in &d.examples {
                        let probs = m.distribution(&self.embedder, &self.vocab, &e.text)?;
                        out.push(self.labels.label(argmax(&probs)).to_string());
                    }
                    Predictions::Classes(out)
                }
                TaskData::Relations(d) => {
                    let mut out = Vec::new();
                    for e in &d.examples {
                        let marked = mark_entities(&e.tokens, e.e1, e.e2)?;
                        let probs = m.distribution_words(&self.embedder, &self.vocab, &marked)?;
                        out.push(self.labels.label(argmax(&probs)).to_string());
                    }
                    Predictions::Classes(out)
                }
                _ => return Err(TaskError::Input("classifier expects texts or relations".to_string())),
            },
            FrozenTrained::Parser(m) => {
                let mut out = Vec::new();
                for t in &data.as_trees()?.sentences {
                    out.push(m.parse(&self.embedder, &self.vocab, &t.tokens, &t.is_punct, &self.labels)?);
                }
                Predictions::Trees(out)
            }
        })
    }

    fn score_split(&self, model: &FrozenTrained<T>, data: &TaskData) -> Result<f64, TaskError> {
        let preds = self.predict_all(model, data)?;
        Ok(score_predictions(self.kind, &self.labels, data, &preds)?.value)
    }

    /// Report for a finished run; asserts the encoder came through untouched.
    pub fn report(
        &self,
        outcome: &GridOutcome<FrozenOutcome<T>>,
        grid: &[GridPoint],
        dataset: SplitPaths,
        seed: u64,
    ) -> Result<RunReport, TaskError> {
        let now = params_checksum(self.embedder.encoder_params());
        if now != self.embedder.checksum() {
            return Err(TaskError::Input(
                "encoder parameters changed during frozen training".to_string(),
            ));
        }
        let preds = self.predict_all(&outcome.models[0].model, &self.splits.test)?;
        let interval = bootstrap_interval(
            self.kind,
            &self.labels,
            &self.splits.test,
            &preds,
            BOOTSTRAP_RESAMPLES,
            BOOTSTRAP_LEVEL,
            derive_seed(seed, "bootstrap"),
        )?;
        let mut report = base_report(self.kind, "frozen", dataset, grid, outcome, interval);
        report.encoder_checksum = Some(now);
        report.casing_note = casing_note(self.kind, self.embedder.config().casing);
        Ok(report)
    }
}

impl<T: Scalar> TaskRunner for FrozenRunner<T> {
    type Trained = FrozenOutcome<T>;

    fn train(
        &mut self,
        max_epochs: u32,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<FrozenOutcome<T>, TrainError> {
        if max_epochs == 0 {
            return Err(TrainError::Invalid("zero epochs".to_string()));
        }
        if batch_size == 0 {
            return Err(TrainError::Invalid("zero batch size".to_string()));
        }
        let n = self.splits.train.len();
        let model = self.build_model(derive_seed(seed, "frozen.model"))?;
        let mut trainable = match &model {
            FrozenTrained::Classifier(m) => m.trainable_params(),
            FrozenTrained::Tagger(m) => m.trainable_params(),
            FrozenTrained::Parser(m) => m.trainable_params(),
        };
        let mut adam = Adam::new();
        let mut rng = rng_from_seed(derive_seed(seed, "frozen.dropout"));
        let run_epoch = |epoch: u32| -> Result<f64, TrainError> {
            let mut order: Vec<usize> = (0..n).collect();
            let mut order_rng =
                rng_from_seed(derive_seed_indexed(seed, "frozen.order", epoch as u64));
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(batch_size) {
                let weight = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let tape = Tape::new();
                    let loss = self.example_loss(&model, i, &tape, &mut rng)?;
                    let scaled = ops::scale(&tape, &loss, weight)
                        .map_err(|e| TrainError::Invalid(e.to_string()))?;
                    tape.backward(&scaled).map_err(|e| TrainError::Invalid(e.to_string()))?;
                }
                adam.step(&trainable, lr)?;
            }
            Ok(self.score_split(&model, &self.splits.dev)?)
        };
        let snapshot = || trainable.deep_clone();
        let report = early_stop_loop(max_epochs, self.patience, run_epoch, snapshot)?
            .expect("at least one epoch ran");
        trainable
            .copy_values_from(&report.best)
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        Ok(FrozenOutcome {
            model,
            best_epoch: report.best_epoch,
            epochs_run: report.history.len() as u32,
            dev_history: report.history,
        })
    }

    fn dev_score(&self, model: &FrozenOutcome<T>) -> Result<f64, TrainError> {
        self.dev_evaluations.set(self.dev_evaluations.get() + 1);
        Ok(self.score_split(&model.model, &self.splits.dev)?)
    }

    fn test_score(&self, model: &FrozenOutcome<T>) -> Result<f64, TrainError> {
        self.test_evaluations.set(self.test_evaluations.get() + 1);
        Ok(self.score_split(&model.model, &self.splits.test)?)
    }
}

//! Masked-LM + next-sentence example construction and the two-phase
//! length-curriculum pretraining loop.
//!
//! Examples are regenerated deterministically from (corpus, seed, phase),
//! masking is static per example, and batch order is a pure function of the
//! step index, so a run can be checkpointed and resumed bitwise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, EncoderConfig, EncoderError, EncoderModel, IntMatrix};
use crate::tensor::ops;
use crate::tensor::{
    load_param_archive, save_param_archive, ArchiveError, ParamSet, Scalar, Tape, Tensor,
    TensorError,
};
use crate::trainer::{lr_at, Adam, TrainError};
use crate::util::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::vocab::{CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIALS};

/// One document, as sentences of content token ids (no specials).
pub type TokenizedDoc = Vec<Vec<u32>>;

pub const STATE_FILE: &str = "state.json";
pub const ENCODER_DIR: &str = "encoder";
pub const HEADS_DIR: &str = "heads";
pub const OPTIMIZER_DIR: &str = "optimizer";

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("cannot form sentence pairs: {0}")]
    CannotFormPairs(String),
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("state json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn id(self) -> u32 {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    /// layout: [CLS] A [SEP] B [SEP]
    pub token_ids: Vec<u32>,
    /// 0 over [CLS] A [SEP], 1 over B [SEP]
    pub segment_ids: Vec<u32>,
    pub mlm_positions: Vec<usize>,
    /// original token ids at the masked positions
    pub mlm_labels: Vec<u32>,
    pub nsp_label: NspLabel,
}

impl PretrainExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn special_positions(&self) -> Vec<usize> {
        let mut out = vec![0];
        for (i, &t) in self.token_ids.iter().enumerate() {
            if t == SEP_ID {
                out.push(i);
            }
        }
        out
    }

    pub fn validate(&self, max_len: usize, mask_rate: f64) -> Result<(), PretrainError> {
        let n = self.token_ids.len();
        if n > max_len {
            return Err(PretrainError::InvalidExample(format!(
                "length {} exceeds {}",
                n, max_len
            )));
        }
        if self.segment_ids.len() != n {
            return Err(PretrainError::InvalidExample("segment length mismatch".to_string()));
        }
        if self.token_ids.first() != Some(&CLS_ID) || self.token_ids.iter().filter(|&&t| t == CLS_ID).count() != 1 {
            return Err(PretrainError::InvalidExample("need exactly one [CLS] at position 0".to_string()));
        }
        let seps: Vec<usize> = self
            .token_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == SEP_ID)
            .map(|(i, _)| i)
            .collect();
        if seps.len() != 2 || seps[1] != n - 1 {
            return Err(PretrainError::InvalidExample(
                "need exactly two [SEP], the second terminal".to_string(),
            ));
        }
        for (i, &s) in self.segment_ids.iter().enumerate() {
            let want = if i <= seps[0] { 0 } else { 1 };
            if s != want {
                return Err(PretrainError::InvalidExample(format!(
                    "segment id {} at position {}, expected {}",
                    s, i, want
                )));
            }
        }
        if self.mlm_positions.len() != self.mlm_labels.len() {
            return Err(PretrainError::InvalidExample("mlm positions/labels mismatch".to_string()));
        }
        let non_special = n - 3;
        let cap = (mask_rate * non_special as f64).ceil() as usize;
        if self.mlm_positions.len() > cap {
            return Err(PretrainError::InvalidExample(format!(
                "{} masked positions exceed cap {}",
                self.mlm_positions.len(),
                cap
            )));
        }
        let specials = self.special_positions();
        for &p in &self.mlm_positions {
            if p >= n || specials.contains(&p) {
                return Err(PretrainError::InvalidExample(format!(
                    "masked position {} is special or out of range",
                    p
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase1_max_len: usize,
    pub phase2_max_len: usize,
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        PhasePlan {
            phase1_max_len: 128,
            phase2_max_len: 512,
            plateau_window: 50,
            plateau_epsilon: 1e-3,
        }
    }
}

impl PhasePlan {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.phase1_max_len >= self.phase2_max_len {
            return Err(PretrainError::Config(format!(
                "phase1_max_len {} must be below phase2_max_len {}",
                self.phase1_max_len, self.phase2_max_len
            )));
        }
        if self.phase1_max_len < 5 {
            return Err(PretrainError::Config("phase1_max_len must be at least 5".to_string()));
        }
        if self.plateau_window < 1 {
            return Err(PretrainError::Config("plateau_window must be >= 1".to_string()));
        }
        if self.plateau_epsilon < 0.0 {
            return Err(PretrainError::Config("plateau_epsilon must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Builds sentence-pair examples for one pass over the corpus. Each
/// document is processed under its own derived seed: sentences are packed
/// greedily toward `max_len - 3`, a random split yields segment A, and a
/// fair coin picks between the true continuation (is_next) and a segment
/// drawn from a different document (not_next). A lone trailing sentence
/// with no continuation is dropped so the coin stays fair. Oversized pairs
/// are truncated from the end of the longer segment.
pub fn make_nsp_pairs(
    docs: &[TokenizedDoc],
    max_len: usize,
    seed: u64,
) -> Result<Vec<PretrainExample>, PretrainError> {
    if max_len < 5 {
        return Err(PretrainError::Config("max_len must be at least 5".to_string()));
    }
    for (d, doc) in docs.iter().enumerate() {
        if doc.is_empty() || doc.iter().any(|s| s.is_empty()) {
            return Err(PretrainError::CannotFormPairs(format!(
                "document {} has an empty sentence list or empty sentence",
                d
            )));
        }
    }
    let budget = max_len - 3;
    let can_other = docs.len() >= 2;
    let mut out = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed_indexed(seed, "nsp.doc", d as u64));
        let m = doc.len();
        let mut i = 0;
        while i < m {
            // pack sentences until the pair budget is reached
            let mut j = i + 1;
            let mut total = doc[i].len();
            while j < m && total < budget {
                total += doc[j].len();
                j += 1;
            }
            if j - i == 1 && j < m {
                // a single over-budget sentence still needs a continuation
                j += 1;
            }
            if j - i == 1 {
                // trailing sentence with nothing to continue into
                break;
            }
            let a_cnt = rng.gen_range(1..j - i);
            let a: Vec<u32> = doc[i..i + a_cnt].concat();
            let is_next = rng.gen_bool(0.5) || !can_other;
            let b: Vec<u32>;
            if is_next {
                b = doc[i + a_cnt..j].concat();
                i = j;
            } else {
                let mut o = rng.gen_range(0..docs.len() - 1);
                if o >= d {
                    o += 1;
                }
                let other = &docs[o];
                let start = rng.gen_range(0..other.len());
                let mut picked = other[start].clone();
                let mut s = start + 1;
                while s < other.len() && a.len() + picked.len() < budget {
                    picked.extend_from_slice(&other[s]);
                    s += 1;
                }
                b = picked;
                i += a_cnt;
            }
            let (mut a, mut b) = (a, b);
            while a.len() + b.len() > budget {
                if a.len() >= b.len() {
                    a.pop();
                } else {
                    b.pop();
                }
            }
            let mut token_ids = Vec::with_capacity(a.len() + b.len() + 3);
            token_ids.push(CLS_ID);
            token_ids.extend_from_slice(&a);
            token_ids.push(SEP_ID);
            let boundary = token_ids.len();
            token_ids.extend_from_slice(&b);
            token_ids.push(SEP_ID);
            let mut segment_ids = vec![0; boundary];
            segment_ids.extend(vec![1; token_ids.len() - boundary]);
            out.push(PretrainExample {
                token_ids,
                segment_ids,
                mlm_positions: Vec::new(),
                mlm_labels: Vec::new(),
                nsp_label: if is_next { NspLabel::IsNext } else { NspLabel::NotNext },
            });
        }
    }
    if out.is_empty() {
        return Err(PretrainError::CannotFormPairs(
            "no document yields a sentence pair (every document is a single sentence?)".to_string(),
        ));
    }
    Ok(out)
}

/// Applies static masking: round(rate * non_special_len) positions chosen
/// without replacement; each becomes [MASK] with probability 0.8, a uniform
/// random non-special token with 0.1, or stays unchanged with 0.1.
pub fn apply_mlm_mask(
    example: &PretrainExample,
    vocab_size: usize,
    rate: f64,
    seed: u64,
) -> Result<PretrainExample, PretrainError> {
    if !example.mlm_positions.is_empty() {
        return Err(PretrainError::InvalidExample("example already masked".to_string()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(PretrainError::Config(format!("mask rate {} outside [0, 1]", rate)));
    }
    let num_specials = SPECIALS.len() as u32;
    if vocab_size <= num_specials as usize {
        return Err(PretrainError::Config("vocabulary has no content tokens".to_string()));
    }
    let special_positions = example.special_positions();
    let mut candidates: Vec<usize> = (0..example.len())
        .filter(|p| !special_positions.contains(p))
        .collect();
    let k = (rate * candidates.len() as f64).round() as usize;
    let mut rng = rng_from_seed(seed);
    // partial Fisher-Yates: the first k entries become the selection
    for idx in 0..k {
        let swap = rng.gen_range(idx..candidates.len());
        candidates.swap(idx, swap);
    }
    let mut positions: Vec<usize> = candidates[..k].to_vec();
    positions.sort_unstable();

    let mut masked = example.clone();
    for &p in &positions {
        let original = masked.token_ids[p];
        masked.mlm_positions.push(p);
        masked.mlm_labels.push(original);
        let draw: f64 = rng.gen();
        if draw < 0.8 {
            masked.token_ids[p] = MASK_ID;
        } else if draw < 0.9 {
            masked.token_ids[p] = rng.gen_range(num_specials..vocab_size as u32);
        }
    }
    Ok(masked)
}

/// MLM projection and NSP classifier parameters.
pub fn init_pretrain_heads<T: Scalar>(config: &EncoderConfig, seed: u64) -> ParamSet<T> {
    let h = config.hidden_size;
    let v = config.vocab_size;
    let mut params = ParamSet::new();
    let mut rng = rng_from_seed(derive_seed(seed, "mlm.w"));
    params.insert("mlm.w", Tensor::trunc_normal(vec![h, v], 0.02, &mut rng));
    params.insert("mlm.b", Tensor::zeros(vec![v]));
    let mut rng = rng_from_seed(derive_seed(seed, "nsp.w"));
    params.insert("nsp.w", Tensor::trunc_normal(vec![h, 2], 0.02, &mut rng));
    params.insert("nsp.b", Tensor::zeros(vec![2]));
    params
}

pub struct StepLosses<T: Scalar> {
    pub total: Tensor<T>,
    pub mlm: f64,
    pub nsp: f64,
}

/// Forward pass over one batch: masked-token cross-entropy plus 2-way
/// next-sentence cross-entropy on the pooled vector. A batch with no masked
/// positions contributes an MLM loss of exactly zero.
pub fn pretrain_step<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    head_params: &ParamSet<T>,
    tape: &Tape<T>,
    batch: &[PretrainExample],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses<T>, PretrainError> {
    if batch.is_empty() {
        return Err(PretrainError::InvalidExample("empty batch".to_string()));
    }
    let max_len = batch.iter().map(|e| e.len()).max().unwrap();
    for e in batch {
        e.validate(config.max_positions, 1.0)?;
    }
    let b = batch.len();
    let mut tokens = IntMatrix::filled(b, max_len, PAD_ID);
    let mut segments = IntMatrix::filled(b, max_len, 0);
    let mut mask = IntMatrix::filled(b, max_len, 0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (j, e) in batch.iter().enumerate() {
        for (p, &t) in e.token_ids.iter().enumerate() {
            tokens.set(j, p, t);
            segments.set(j, p, e.segment_ids[p]);
            mask.set(j, p, 1);
        }
        for (&p, &l) in e.mlm_positions.iter().zip(&e.mlm_labels) {
            rows.push(j * max_len + p);
            labels.push(l);
        }
    }
    let out = encode(config, enc_params, tape, &tokens, &segments, &mask, train, rng)?;

    let mlm_loss = if rows.is_empty() {
        Tensor::scalar(T::zero())
    } else {
        let gathered = ops::index_rows(tape, &out.flat, &rows)?;
        let logits = ops::add_bias(
            tape,
            &ops::matmul(tape, &gathered, head_params.get("mlm.w")?)?,
            head_params.get("mlm.b")?,
        )?;
        ops::cross_entropy(tape, &logits, &labels, None)?
    };
    let nsp_targets: Vec<u32> = batch.iter().map(|e| e.nsp_label.id()).collect();
    let nsp_logits = ops::add_bias(
        tape,
        &ops::matmul(tape, &out.pooled, head_params.get("nsp.w")?)?,
        head_params.get("nsp.b")?,
    )?;
    let nsp_loss = ops::cross_entropy(tape, &nsp_logits, &nsp_targets, None)?;
    let total = ops::add(tape, &mlm_loss, &nsp_loss)?;
    Ok(StepLosses {
        total,
        mlm: mlm_loss.item()?.to_f64(),
        nsp: nsp_loss.item()?.to_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub plan: PhasePlan,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            plan: PhasePlan::default(),
            total_steps: 1000,
            batch_size: 8,
            lr_max: 1e-3,
            warmup_fraction: 0.1,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        self.plan.validate()?;
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(PretrainError::Config("total_steps and batch_size must be positive".to_string()));
        }
        if self.lr_max <= 0.0 || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(PretrainError::Config("lr_max must be positive, warmup_fraction in [0, 1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(PretrainError::Config("mask_rate must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// Names of fields on which the two configs disagree.
    pub fn mismatch_keys(&self, other: &PretrainConfig) -> Vec<&'static str> {
        let mut keys = Vec::new();
        if self.plan != other.plan {
            keys.push("plan");
        }
        if self.total_steps != other.total_steps {
            keys.push("total_steps");
        }
        if self.batch_size != other.batch_size {
            keys.push("batch_size");
        }
        if self.lr_max != other.lr_max {
            keys.push("lr_max");
        }
        if self.warmup_fraction != other.warmup_fraction {
            keys.push("warmup_fraction");
        }
        if self.mask_rate != other.mask_rate {
            keys.push("mask_rate");
        }
        if self.seed != other.seed {
            keys.push("seed");
        }
        keys
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub phase: u8,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub phase_switch_step: Option<u64>,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunState {
    next_step: u64,
    phase: u8,
    phase_switch_step: Option<u64>,
    plateau_hit: bool,
    /// sliding window of the last 2*plateau_window total losses (phase 1)
    loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    config: PretrainConfig,
    state: RunState,
}

/// A checkpointable pretraining run. Examples and batch order are derived
/// from (seed, phase, step), so saving at any step and reloading continues
/// the exact same trajectory.
pub struct Pretrainer<T: Scalar> {
    pub model: EncoderModel<T>,
    pub heads: ParamSet<T>,
    config: PretrainConfig,
    opt: Adam<T>,
    combined: ParamSet<T>,
    state: RunState,
    phase_examples: Option<(u8, Vec<PretrainExample>)>,
    pass_order: Option<(u64, Vec<usize>)>,
}

fn combine<T: Scalar>(model: &EncoderModel<T>, heads: &ParamSet<T>) -> ParamSet<T> {
    let mut combined = ParamSet::new();
    for (n, t) in model.params.iter() {
        combined.insert(format!("encoder.{}", n), t.clone());
    }
    for (n, t) in heads.iter() {
        combined.insert(format!("heads.{}", n), t.clone());
    }
    combined
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(model: EncoderModel<T>, config: PretrainConfig) -> Result<Self, PretrainError> {
        config.validate()?;
        if model.config.max_positions < config.plan.phase1_max_len {
            return Err(PretrainError::Config(format!(
                "model max_positions {} below phase1_max_len {}",
                model.config.max_positions, config.plan.phase1_max_len
            )));
        }
        let heads = init_pretrain_heads(&model.config, derive_seed(config.seed, "pretrain.heads"));
        let combined = combine(&model, &heads);
        Ok(Pretrainer {
            model,
            heads,
            config,
            opt: Adam::new(),
            combined,
            state: RunState {
                next_step: 0,
                phase: 1,
                phase_switch_step: None,
                plateau_hit: false,
                loss_history: Vec::new(),
            },
            phase_examples: None,
            pass_order: None,
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> u64 {
        self.state.next_step
    }

    pub fn is_done(&self) -> bool {
        self.state.next_step >= self.config.total_steps
    }

    pub fn phase(&self) -> u8 {
        self.state.phase
    }

    pub fn phase_switch_step(&self) -> Option<u64> {
        self.state.phase_switch_step
    }

    /// True when the whole budget ran out while still in phase 1.
    pub fn budget_exhausted(&self) -> bool {
        self.is_done() && !self.state.plateau_hit
    }

    fn phase_max_len(&self) -> usize {
        match self.state.phase {
            1 => self.config.plan.phase1_max_len,
            _ => self.config.plan.phase2_max_len,
        }
    }

    fn examples_for_phase(&mut self, docs: &[TokenizedDoc]) -> Result<&[PretrainExample], PretrainError> {
        let phase = self.state.phase;
        let stale = match &self.phase_examples {
            Some((p, _)) => *p != phase,
            None => true,
        };
        if stale {
            let pair_seed = derive_seed_indexed(self.config.seed, "nsp.phase", phase as u64);
            let pairs = make_nsp_pairs(docs, self.phase_max_len(), pair_seed)?;
            let mut masked = Vec::with_capacity(pairs.len());
            for (i, p) in pairs.into_iter().enumerate() {
                let mask_seed = derive_seed_indexed(
                    derive_seed_indexed(self.config.seed, "mlm.phase", phase as u64),
                    "example",
                    i as u64,
                );
                masked.push(apply_mlm_mask(&p, self.model.config.vocab_size, self.config.mask_rate, mask_seed)?);
            }
            self.phase_examples = Some((phase, masked));
            self.pass_order = None;
        }
        Ok(&self.phase_examples.as_ref().unwrap().1)
    }

    fn phase_start(&self) -> u64 {
        match self.state.phase {
            1 => 0,
            _ => self.state.phase_switch_step.unwrap_or(0),
        }
    }

    /// Runs up to `steps` more optimization steps, stopping early when the
    /// budget is done. Returns the log entries produced by this call.
    pub fn run(&mut self, docs: &[TokenizedDoc], steps: u64) -> Result<Vec<LogEntry>, PretrainError> {
        let mut entries = Vec::new();
        let mut done_here = 0;
        while !self.is_done() && done_here < steps {
            let step = self.state.next_step;
            let phase = self.state.phase;
            let phase_step = step - self.phase_start();
            let batch: Vec<PretrainExample> = {
                let examples = self.examples_for_phase(docs)?;
                let n = examples.len();
                let mut batch = Vec::with_capacity(self.config.batch_size);
                for j in 0..self.config.batch_size {
                    let g = phase_step * self.config.batch_size as u64 + j as u64;
                    let pass = g / n as u64;
                    let order_is_stale = match &self.pass_order {
                        Some((p, _)) => *p != pass,
                        None => true,
                    };
                    if order_is_stale {
                        let mut order: Vec<usize> = (0..n).collect();
                        let mut rng = rng_from_seed(derive_seed_indexed(
                            derive_seed_indexed(self.config.seed, "pass.phase", phase as u64),
                            "pass",
                            pass,
                        ));
                        for idx in (1..n).rev() {
                            let swap = rng.gen_range(0..=idx);
                            order.swap(idx, swap);
                        }
                        self.pass_order = Some((pass, order));
                    }
                    let order = &self.pass_order.as_ref().unwrap().1;
                    let examples = &self.phase_examples.as_ref().unwrap().1;
                    batch.push(examples[order[(g % n as u64) as usize]].clone());
                }
                batch
            };

            let lr = lr_at(step + 1, self.config.total_steps, self.config.lr_max, self.config.warmup_fraction);
            let tape = Tape::new();
            let mut step_rng = rng_from_seed(derive_seed_indexed(self.config.seed, "dropout.step", step));
            let losses = pretrain_step(
                &self.model.config,
                &self.model.params,
                &self.heads,
                &tape,
                &batch,
                true,
                &mut step_rng,
            )?;
            tape.backward(&losses.total)?;
            self.opt.step(&self.combined, lr)?;

            let entry = LogEntry {
                step: step + 1,
                phase,
                mlm_loss: losses.mlm,
                nsp_loss: losses.nsp,
                lr,
            };
            entries.push(entry);
            self.state.next_step = step + 1;
            done_here += 1;

            if phase == 1 {
                let w = self.config.plan.plateau_window;
                self.state.loss_history.push(losses.mlm + losses.nsp);
                if self.state.loss_history.len() > 2 * w {
                    self.state.loss_history.remove(0);
                }
                if self.state.loss_history.len() == 2 * w {
                    let prev: f64 = self.state.loss_history[..w].iter().sum::<f64>() / w as f64;
                    let cur: f64 = self.state.loss_history[w..].iter().sum::<f64>() / w as f64;
                    let improvement = (prev - cur).max(0.0) / prev.abs().max(1e-12);
                    if improvement < self.config.plan.plateau_epsilon {
                        self.switch_phase()?;
                    }
                }
            }
        }
        Ok(entries)
    }

    fn switch_phase(&mut self) -> Result<(), PretrainError> {
        self.state.plateau_hit = true;
        self.state.phase = 2;
        self.state.phase_switch_step = Some(self.state.next_step);
        self.state.loss_history.clear();
        if self.model.config.max_positions < self.config.plan.phase2_max_len {
            self.model.extend_positions(
                self.config.plan.phase2_max_len,
                derive_seed(self.config.seed, "extend.positions"),
            )?;
        }
        // the position table changed shape, so rebind the optimizer
        self.combined = combine(&self.model, &self.heads);
        self.opt = Adam::new();
        self.phase_examples = None;
        self.pass_order = None;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), PretrainError> {
        fs::create_dir_all(dir.join(ENCODER_DIR))?;
        fs::create_dir_all(dir.join(HEADS_DIR))?;
        fs::create_dir_all(dir.join(OPTIMIZER_DIR))?;
        self.model.save(&dir.join(ENCODER_DIR))?;
        save_param_archive(&self.heads, &dir.join(HEADS_DIR))?;
        save_param_archive(&self.opt.export_state(), &dir.join(OPTIMIZER_DIR))?;
        let saved = SavedState {
            config: self.config.clone(),
            state: self.state.clone(),
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&saved)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PretrainError> {
        let saved: SavedState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        saved.config.validate()?;
        let model = EncoderModel::<T>::load(&dir.join(ENCODER_DIR))?;
        let heads: ParamSet<T> = load_param_archive(&dir.join(HEADS_DIR))?;
        let mut opt = Adam::new();
        opt.import_state(&load_param_archive(&dir.join(OPTIMIZER_DIR))?)?;
        let combined = combine(&model, &heads);
        Ok(Pretrainer {
            model,
            heads,
            config: saved.config,
            opt,
            combined,
            state: saved.state,
            phase_examples: None,
            pass_order: None,
        })
    }
}

/// Convenience wrapper: runs the full curriculum to the step budget and
/// collects the whole log.
pub fn run_curriculum<T: Scalar>(
    model: EncoderModel<T>,
    docs: &[TokenizedDoc],
    config: PretrainConfig,
) -> Result<(Pretrainer<T>, TrainingLog), PretrainError> {
    let mut session = Pretrainer::new(model, config)?;
    let entries = session.run(docs, u64::MAX)?;
    let log = TrainingLog {
        entries,
        phase_switch_step: session.phase_switch_step(),
        budget_exhausted: session.budget_exhausted(),
    };
    Ok((session, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::tensor::params_checksum;
    use crate::vocab::Casing;

    fn toy_docs(num_docs: usize, sents_per_doc: usize, sent_len: usize, vocab: usize, seed: u64) -> Vec<TokenizedDoc> {
        let mut rng = rng_from_seed(seed);
        (0..num_docs)
            .map(|_| {
                (0..sents_per_doc)
                    .map(|_| (0..sent_len).map(|_| rng.gen_range(5..vocab as u32)).collect())
                    .collect()
            })
            .collect()
    }

    fn test_cfg(vocab: usize, max_pos: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_size: 32,
            num_heads: 2,
            ff_size: 64,
            max_positions: max_pos,
            vocab_size: vocab,
            dropout: 0.1,
            casing: Casing::Uncased,
        }
    }

    #[test]
    fn nsp_pairs_balanced_and_well_formed() {
        let docs = toy_docs(2, 2, 5, 60, 1);
        let mut is_next = 0usize;
        let mut total = 0usize;
        for seed in 0..500 {
            let pairs = make_nsp_pairs(&docs, 64, seed).unwrap();
            for p in &pairs {
                p.validate(64, 0.0).unwrap();
                assert_eq!(p.token_ids[0], CLS_ID);
                assert_eq!(p.token_ids.iter().filter(|&&t| t == SEP_ID).count(), 2);
                if p.nsp_label == NspLabel::IsNext {
                    is_next += 1;
                }
                total += 1;
            }
        }
        assert!(total >= 1000, "only {} examples", total);
        let frac = is_next as f64 / total as f64;
        assert!((0.4..=0.6).contains(&frac), "is_next fraction {}", frac);
    }

    #[test]
    fn nsp_pairs_deterministic_in_seed() {
        let docs = toy_docs(3, 4, 6, 80, 2);
        let a = make_nsp_pairs(&docs, 48, 9).unwrap();
        let b = make_nsp_pairs(&docs, 48, 9).unwrap();
        assert_eq!(a, b);
        let c = make_nsp_pairs(&docs, 48, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nsp_pairs_truncate_longer_segment_from_end() {
        // one long A sentence and a short continuation
        let docs = vec![
            vec![(5..105u32).collect::<Vec<_>>(), vec![200, 201, 202]],
            vec![vec![300, 301], vec![302, 303]],
        ];
        for seed in 0..20 {
            for p in make_nsp_pairs(&docs, 32, seed).unwrap() {
                assert!(p.len() <= 32);
                let sep1 = p.token_ids.iter().position(|&t| t == SEP_ID).unwrap();
                let a = &p.token_ids[1..sep1];
                if a.first() == Some(&5) {
                    // the long sentence was cut from its end, prefix intact
                    for (i, &t) in a.iter().enumerate() {
                        assert_eq!(t, 5 + i as u32);
                    }
                }
            }
        }
    }

    #[test]
    fn nsp_rejects_hopeless_corpora() {
        let single = vec![vec![vec![7, 8, 9]]];
        assert!(matches!(
            make_nsp_pairs(&single, 32, 0),
            Err(PretrainError::CannotFormPairs(_))
        ));
    }

    #[test]
    fn single_multi_sentence_doc_falls_back_to_is_next() {
        let docs = vec![vec![vec![5, 6], vec![7, 8], vec![9, 10], vec![11, 12]]];
        let pairs = make_nsp_pairs(&docs, 16, 3).unwrap();
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|p| p.nsp_label == NspLabel::IsNext));
    }

    #[test]
    fn mlm_mask_counts_and_labels() {
        let docs = toy_docs(2, 3, 20, 120, 4);
        let pairs = make_nsp_pairs(&docs, 64, 5).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            let masked = apply_mlm_mask(p, 120, 0.15, 1000 + i as u64).unwrap();
            masked.validate(64, 0.15).unwrap();
            let non_special = masked.len() - 3;
            assert_eq!(masked.mlm_positions.len(), (0.15 * non_special as f64).round() as usize);
            for (&pos, &label) in masked.mlm_positions.iter().zip(&masked.mlm_labels) {
                assert_eq!(label, p.token_ids[pos]);
            }
            // zero rate selects nothing
            let untouched = apply_mlm_mask(p, 120, 0.0, 7).unwrap();
            assert!(untouched.mlm_positions.is_empty());
            assert_eq!(untouched.token_ids, p.token_ids);
        }
    }

    #[test]
    fn mlm_mask_action_fractions() {
        let docs = toy_docs(4, 5, 30, 200, 6);
        let pairs = make_nsp_pairs(&docs, 128, 7).unwrap();
        let mut masked_cnt = 0usize;
        let mut random_cnt = 0usize;
        let mut kept_cnt = 0usize;
        let mut seed = 0u64;
        let mut total = 0usize;
        while total < 10_000 {
            for p in &pairs {
                let m = apply_mlm_mask(p, 200, 0.15, seed).unwrap();
                seed += 1;
                for (&pos, &label) in m.mlm_positions.iter().zip(&m.mlm_labels) {
                    total += 1;
                    let now = m.token_ids[pos];
                    if now == MASK_ID {
                        masked_cnt += 1;
                    } else if now == label {
                        kept_cnt += 1;
                    } else {
                        random_cnt += 1;
                        assert!(now >= SPECIALS.len() as u32 && (now as usize) < 200);
                    }
                }
            }
        }
        let t = total as f64;
        assert!((masked_cnt as f64 / t - 0.8).abs() < 0.02, "mask frac {}", masked_cnt as f64 / t);
        // a random replacement can coincide with the original, so allow the
        // same +-0.02 band around each nominal 0.10
        assert!((random_cnt as f64 / t - 0.1).abs() < 0.02, "random frac {}", random_cnt as f64 / t);
        assert!((kept_cnt as f64 / t - 0.1).abs() < 0.02, "kept frac {}", kept_cnt as f64 / t);
    }

    #[test]
    fn mlm_mask_never_touches_specials() {
        let docs = toy_docs(2, 2, 10, 90, 8);
        let pairs = make_nsp_pairs(&docs, 48, 9).unwrap();
        for seed in 0..2000 {
            for p in &pairs {
                let m = apply_mlm_mask(p, 90, 0.5, seed).unwrap();
                for &pos in &m.mlm_positions {
                    assert_ne!(m.token_ids[pos], CLS_ID);
                    assert_ne!(p.token_ids[pos], SEP_ID);
                    assert_ne!(pos, 0);
                }
            }
        }
    }

    #[test]
    fn untrained_losses_match_uniform_expectations() {
        let vocab = 100;
        let cfg = test_cfg(vocab, 64);
        let model = init_params::<f32>(&cfg, 50).unwrap();
        let heads = init_pretrain_heads::<f32>(&cfg, 51);
        let docs = toy_docs(3, 4, 8, vocab, 52);
        let pairs = make_nsp_pairs(&docs, 48, 53).unwrap();
        let batch: Vec<PretrainExample> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| apply_mlm_mask(p, vocab, 0.15, 60 + i as u64).unwrap())
            .collect();
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let losses = pretrain_step(&cfg, &model.params, &heads, &tape, &batch, false, &mut rng).unwrap();
        assert!((losses.mlm - (vocab as f64).ln()).abs() < 0.3, "mlm {}", losses.mlm);
        assert!((losses.nsp - 2f64.ln()).abs() < 0.1, "nsp {}", losses.nsp);
    }

    #[test]
    fn zero_masked_positions_gives_zero_mlm_loss() {
        let cfg = test_cfg(60, 64);
        let model = init_params::<f32>(&cfg, 70).unwrap();
        let heads = init_pretrain_heads::<f32>(&cfg, 71);
        let docs = toy_docs(2, 2, 5, 60, 72);
        let batch = make_nsp_pairs(&docs, 32, 73).unwrap();
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let losses = pretrain_step(&cfg, &model.params, &heads, &tape, &batch, false, &mut rng).unwrap();
        assert_eq!(losses.mlm, 0.0);
        assert!(losses.nsp > 0.0);
    }

    fn quick_config(total: u64, window: usize, epsilon: f64, p1: usize, p2: usize) -> PretrainConfig {
        PretrainConfig {
            plan: PhasePlan {
                phase1_max_len: p1,
                phase2_max_len: p2,
                plateau_window: window,
                plateau_epsilon: epsilon,
            },
            total_steps: total,
            batch_size: 4,
            lr_max: 3e-3,
            warmup_fraction: 0.1,
            mask_rate: 0.15,
            seed: 42,
        }
    }

    #[test]
    fn huge_epsilon_switches_at_twice_window() {
        let vocab = 60;
        let cfg = test_cfg(vocab, 24);
        let model = init_params::<f32>(&cfg, 80).unwrap();
        let docs = toy_docs(3, 3, 6, vocab, 81);
        let (session, log) = run_curriculum(model, &docs, quick_config(12, 3, 1e9, 24, 40)).unwrap();
        assert_eq!(log.phase_switch_step, Some(6));
        assert!(!log.budget_exhausted);
        assert_eq!(log.entries.len(), 12);
        assert!(log.entries[..6].iter().all(|e| e.phase == 1));
        assert!(log.entries[6..].iter().all(|e| e.phase == 2));
        assert_eq!(session.model.config.max_positions, 40);
        let pos = session.model.params.get("embed.position").unwrap();
        assert_eq!(pos.shape(), &[40, cfg.hidden_size]);
    }

    #[test]
    fn zero_epsilon_never_switches_and_sets_flag() {
        let vocab = 60;
        let cfg = test_cfg(vocab, 24);
        let model = init_params::<f32>(&cfg, 82).unwrap();
        let docs = toy_docs(3, 3, 6, vocab, 83);
        let (session, log) = run_curriculum(model, &docs, quick_config(10, 2, 0.0, 24, 40)).unwrap();
        assert_eq!(log.phase_switch_step, None);
        assert!(log.budget_exhausted);
        assert!(log.entries.iter().all(|e| e.phase == 1));
        assert_eq!(session.model.config.max_positions, 24);
    }

    #[test]
    fn phase2_examples_use_longer_lengths() {
        let vocab = 80;
        let cfg = test_cfg(vocab, 16);
        let model = init_params::<f32>(&cfg, 84).unwrap();
        // sentences of 6 tokens: phase-1 pairs cap at 16, phase 2 at 32
        let docs = toy_docs(3, 6, 6, vocab, 85);
        let (session, log) = run_curriculum(model, &docs, quick_config(8, 2, 1e9, 16, 32)).unwrap();
        assert_eq!(log.phase_switch_step, Some(4));
        let p1 = make_nsp_pairs(&docs, 16, derive_seed_indexed(42, "nsp.phase", 1)).unwrap();
        let p2 = make_nsp_pairs(&docs, 32, derive_seed_indexed(42, "nsp.phase", 2)).unwrap();
        assert!(p1.iter().all(|e| e.len() <= 16));
        assert!(p2.iter().any(|e| e.len() > 16));
        assert!(session.model.config.max_positions >= 32);
    }

    #[test]
    fn training_reduces_loss_on_memorizable_corpus() {
        let vocab = 40;
        let cfg = test_cfg(vocab, 20);
        let model = init_params::<f32>(&cfg, 86).unwrap();
        let docs = toy_docs(2, 5, 4, vocab, 87);
        let mut config = quick_config(200, 25, 0.0, 20, 32);
        config.lr_max = 2e-3;
        let (_, log) = run_curriculum(model, &docs, config).unwrap();
        let first: f64 = log.entries[..20]
            .iter()
            .map(|e| e.mlm_loss + e.nsp_loss)
            .sum::<f64>()
            / 20.0;
        let last: f64 = log.entries[180..]
            .iter()
            .map(|e| e.mlm_loss + e.nsp_loss)
            .sum::<f64>()
            / 20.0;
        assert!(last < first, "windowed loss did not drop: {} -> {}", first, last);
        let step0 = log.entries[0].mlm_loss + log.entries[0].nsp_loss;
        let final_total = log.entries.last().unwrap().mlm_loss + log.entries.last().unwrap().nsp_loss;
        assert!(final_total < step0);
    }

    #[test]
    fn identical_inputs_give_identical_logs() {
        let vocab = 50;
        let cfg = test_cfg(vocab, 20);
        let docs = toy_docs(2, 3, 5, vocab, 88);
        let run = |init_seed: u64| {
            let model = init_params::<f64>(&cfg, init_seed).unwrap();
            run_curriculum(model, &docs, quick_config(6, 2, 1e9, 20, 32)).unwrap().1
        };
        let a = run(90);
        let b = run(90);
        assert_eq!(a.entries, b.entries);
        let c = run(91);
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let vocab = 50;
        let cfg = test_cfg(vocab, 20);
        let docs = toy_docs(2, 4, 5, vocab, 92);
        let config = quick_config(10, 2, 1e9, 20, 32);

        let model = init_params::<f32>(&cfg, 93).unwrap();
        let (full_session, full_log) = run_curriculum(model, &docs, config.clone()).unwrap();

        let model = init_params::<f32>(&cfg, 93).unwrap();
        let mut part = Pretrainer::new(model, config).unwrap();
        let mut entries = part.run(&docs, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        part.save(dir.path()).unwrap();
        let mut resumed = Pretrainer::<f32>::load(dir.path()).unwrap();
        entries.extend(resumed.run(&docs, u64::MAX).unwrap());

        assert_eq!(entries, full_log.entries);
        assert_eq!(
            params_checksum(&resumed.model.params),
            params_checksum(&full_session.model.params)
        );
        assert_eq!(params_checksum(&resumed.heads), params_checksum(&full_session.heads));
        assert_eq!(resumed.phase_switch_step(), full_session.phase_switch_step());
    }
}

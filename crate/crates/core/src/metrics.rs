//! Evaluation metrics: span/token/sentence F1, attachment scores, and
//! bootstrap confidence intervals.
//!
//! Conventions used throughout: F1 = 0 whenever precision or recall has a
//! zero denominator, and macro averages run over the classes present in the
//! gold data (per-class tables still list classes that only appear in
//! predictions).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::DependencyTree;
use crate::util::rng_from_seed;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("unknown tag {0}")]
    UnknownTag(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("label {0} outside the declared set")]
    UnknownLabel(String),
    #[error("bootstrap needs at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// A labeled token range with an inclusive end index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, ClassScores>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Extracts entity spans from a BIO tag sequence. Maximal `B-X (I-X)*` runs
/// become spans; an `I-X` with no live span of the same type starts a new
/// span instead of being dropped. The bool reports whether that repair was
/// ever needed.
pub fn spans_from_bio<S: AsRef<str>>(tags: &[S]) -> Result<(Vec<Span>, bool), MetricError> {
    let mut spans = Vec::new();
    let mut repaired = false;
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == "O" {
            if let Some((start, label)) = open.take() {
                spans.push(Span::new(start, i - 1, label));
            }
        } else if let Some(t) = tag.strip_prefix("B-") {
            if let Some((start, label)) = open.take() {
                spans.push(Span::new(start, i - 1, label));
            }
            open = Some((i, t.to_string()));
        } else if let Some(t) = tag.strip_prefix("I-") {
            match &open {
                Some((_, label)) if label == t => {}
                _ => {
                    if let Some((start, label)) = open.take() {
                        spans.push(Span::new(start, i - 1, label));
                    }
                    repaired = true;
                    open = Some((i, t.to_string()));
                }
            }
        } else {
            return Err(MetricError::UnknownTag(tag.to_string()));
        }
    }
    if let Some((start, label)) = open {
        spans.push(Span::new(start, tags.len() - 1, label));
    }
    Ok((spans, repaired))
}

/// Span-level macro F1: a predicted span counts only on an exact
/// (start, end, label) match; per-type counts pool over the whole corpus
/// and the macro average runs over types present in gold.
pub fn span_f1_macro(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<MetricResult, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<String, usize> = BTreeMap::new();
    let mut gold_types = BTreeSet::new();
    let mut support: BTreeMap<String, usize> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gset: BTreeSet<&Span> = g.iter().collect();
        let pset: BTreeSet<&Span> = p.iter().collect();
        for s in &gset {
            gold_types.insert(s.label.clone());
            *support.entry(s.label.clone()).or_default() += 1;
            if pset.contains(s) {
                *tp.entry(s.label.clone()).or_default() += 1;
            } else {
                *fn_.entry(s.label.clone()).or_default() += 1;
            }
        }
        for s in &pset {
            if !gset.contains(s) {
                *fp.entry(s.label.clone()).or_default() += 1;
            }
        }
    }
    let mut per_class = BTreeMap::new();
    let mut all_types: BTreeSet<String> = gold_types.clone();
    all_types.extend(fp.keys().cloned());
    for t in &all_types {
        let (precision, recall, f1) = prf(
            tp.get(t).copied().unwrap_or(0),
            fp.get(t).copied().unwrap_or(0),
            fn_.get(t).copied().unwrap_or(0),
        );
        per_class.insert(
            t.clone(),
            ClassScores {
                precision,
                recall,
                f1,
                support: support.get(t).copied().unwrap_or(0),
            },
        );
    }
    let value = if gold_types.is_empty() {
        if pred.iter().all(|p| p.is_empty()) {
            1.0
        } else {
            0.0
        }
    } else {
        gold_types.iter().map(|t| per_class[t].f1).sum::<f64>() / gold_types.len() as f64
    };
    Ok(MetricResult {
        name: "span_f1_macro".to_string(),
        value,
        per_class: Some(per_class),
        ci_low: None,
        ci_high: None,
    })
}

/// Token-level macro F1 over non-O classes, each class pooled over the
/// whole corpus.
pub fn token_f1_macro(
    gold: &[Vec<String>],
    pred: &[Vec<String>],
) -> Result<MetricResult, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<String, usize> = BTreeMap::new();
    let mut support: BTreeMap<String, usize> = BTreeMap::new();
    let mut gold_classes = BTreeSet::new();
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(MetricError::LengthMismatch(format!(
                "sentence {}: {} gold tokens vs {} predicted",
                i + 1,
                g.len(),
                p.len()
            )));
        }
        for (gt, pt) in g.iter().zip(p) {
            if gt != "O" {
                gold_classes.insert(gt.clone());
                *support.entry(gt.clone()).or_default() += 1;
            }
            if gt == pt {
                if gt != "O" {
                    *tp.entry(gt.clone()).or_default() += 1;
                }
            } else {
                if pt != "O" {
                    *fp.entry(pt.clone()).or_default() += 1;
                }
                if gt != "O" {
                    *fn_.entry(gt.clone()).or_default() += 1;
                }
            }
        }
    }
    let mut per_class = BTreeMap::new();
    let mut all: BTreeSet<String> = gold_classes.clone();
    all.extend(fp.keys().cloned());
    for c in &all {
        let (precision, recall, f1) = prf(
            tp.get(c).copied().unwrap_or(0),
            fp.get(c).copied().unwrap_or(0),
            fn_.get(c).copied().unwrap_or(0),
        );
        per_class.insert(
            c.clone(),
            ClassScores {
                precision,
                recall,
                f1,
                support: support.get(c).copied().unwrap_or(0),
            },
        );
    }
    let value = if gold_classes.is_empty() {
        if fp.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        gold_classes.iter().map(|c| per_class[c].f1).sum::<f64>() / gold_classes.len() as f64
    };
    Ok(MetricResult {
        name: "token_f1_macro".to_string(),
        value,
        per_class: Some(per_class),
        ci_low: None,
        ci_high: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    Macro,
    Micro,
}

/// Sentence-level F1 for classification tasks. Macro averages per-class F1
/// over the classes present in gold; micro pools counts, which reduces to
/// plain accuracy when every instance carries exactly one label.
pub fn sentence_f1(
    gold: &[String],
    pred: &[String],
    declared: &[String],
    mode: F1Mode,
) -> Result<MetricResult, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} gold labels vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let declared_set: BTreeSet<&str> = declared.iter().map(|s| s.as_str()).collect();
    for l in gold.iter().chain(pred) {
        if !declared_set.contains(l.as_str()) {
            return Err(MetricError::UnknownLabel(l.clone()));
        }
    }
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<&str, usize> = BTreeMap::new();
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut gold_classes = BTreeSet::new();
    for (g, p) in gold.iter().zip(pred) {
        gold_classes.insert(g.as_str());
        *support.entry(g.as_str()).or_default() += 1;
        if g == p {
            *tp.entry(g.as_str()).or_default() += 1;
        } else {
            *fn_.entry(g.as_str()).or_default() += 1;
            *fp.entry(p.as_str()).or_default() += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut all: BTreeSet<&str> = gold_classes.clone();
    all.extend(fp.keys().copied());
    for c in &all {
        let (precision, recall, f1) = prf(
            tp.get(c).copied().unwrap_or(0),
            fp.get(c).copied().unwrap_or(0),
            fn_.get(c).copied().unwrap_or(0),
        );
        per_class.insert(
            c.to_string(),
            ClassScores {
                precision,
                recall,
                f1,
                support: support.get(c).copied().unwrap_or(0),
            },
        );
    }
    let value = match mode {
        F1Mode::Macro => {
            if gold_classes.is_empty() {
                0.0
            } else {
                gold_classes.iter().map(|c| per_class[*c].f1).sum::<f64>() / gold_classes.len() as f64
            }
        }
        F1Mode::Micro => {
            let t: usize = tp.values().sum();
            let f_p: usize = fp.values().sum();
            let f_n: usize = fn_.values().sum();
            prf(t, f_p, f_n).2
        }
    };
    Ok(MetricResult {
        name: match mode {
            F1Mode::Macro => "sentence_f1_macro".to_string(),
            F1Mode::Micro => "sentence_f1_micro".to_string(),
        },
        value,
        per_class: Some(per_class),
        ci_low: None,
        ci_high: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttachmentScores {
    pub uas: f64,
    pub las: f64,
}

/// UAS/LAS pooled over all sentences, with tokens flagged `is_punct` in the
/// gold trees left out of both numerator and denominator.
pub fn attachment_scores(
    gold: &[DependencyTree],
    pred: &[DependencyTree],
) -> Result<AttachmentScores, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} gold trees vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut scored = 0usize;
    let mut head_ok = 0usize;
    let mut both_ok = 0usize;
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(MetricError::LengthMismatch(format!(
                "sentence {}: {} gold tokens vs {} predicted",
                i + 1,
                g.len(),
                p.len()
            )));
        }
        for t in 0..g.len() {
            if g.is_punct[t] {
                continue;
            }
            scored += 1;
            if g.heads[t] == p.heads[t] {
                head_ok += 1;
                if g.labels[t] == p.labels[t] {
                    both_ok += 1;
                }
            }
        }
    }
    if scored == 0 {
        return Err(MetricError::Invalid("no scorable tokens".to_string()));
    }
    Ok(AttachmentScores {
        uas: head_ok as f64 / scored as f64,
        las: both_ok as f64 / scored as f64,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile bootstrap over evaluation units (one unit = one aligned
/// gold/pred pair). Resamples units with replacement `resamples` times,
/// recomputes the metric, and returns the (1-level)/2 and 1-(1-level)/2
/// percentiles. Deterministic in `seed`.
pub fn bootstrap_ci<G, P, F>(
    metric_fn: F,
    gold: &[G],
    pred: &[P],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), MetricError>
where
    G: Clone,
    P: Clone,
    F: Fn(&[G], &[P]) -> f64,
{
    if gold.len() != pred.len() {
        return Err(MetricError::LengthMismatch(format!(
            "{} gold units vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let n = gold.len();
    if n < 2 {
        return Err(MetricError::TooFewUnits(n));
    }
    if !(0.0..1.0).contains(&level) || resamples == 0 {
        return Err(MetricError::Invalid("level must be in [0,1) and resamples > 0".to_string()));
    }
    let mut rng = rng_from_seed(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut g_sample = Vec::with_capacity(n);
    let mut p_sample = Vec::with_capacity(n);
    for _ in 0..resamples {
        g_sample.clear();
        p_sample.clear();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            g_sample.push(gold[i].clone());
            p_sample.push(pred[i].clone());
        }
        values.push(metric_fn(&g_sample, &p_sample));
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&values, alpha), percentile(&values, 1.0 - alpha)))
}

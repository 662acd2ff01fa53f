//! Task dataset containers and their on-disk formats.
//!
//! Formats:
//! - tagging (NER/PICO): CoNLL-style `token<TAB>tag` lines, blank line
//!   between sentences
//! - dependency: tab-separated `index form head label is_punct` with
//!   1-based token indices, head 0 meaning the virtual root, blank-line
//!   sentence separation
//! - classification: JSONL `{"text", "label"}`
//! - relation: JSONL `{"tokens", "e1": [start, end], "e2": [start, end],
//!   "label"}` with end-inclusive word indices

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence {sentence}: {message}")]
    BadTree { sentence: usize, message: String },
    #[error("invalid label set: {0}")]
    BadLabelSet(String),
}

fn malformed(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    Plain,
    Bio,
}

/// How one tag relates to the BIO structure; `usize` indexes into the
/// label set's entity-type table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioKind {
    Outside,
    Begin(usize),
    Inside(usize),
}

/// Ordered, unique label strings plus their tagging scheme.
#[derive(Debug, Clone)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    scheme: LabelScheme,
    /// entity types for bio scheme, in first-appearance order
    types: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>, scheme: LabelScheme) -> Result<Self, DatasetError> {
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(DatasetError::BadLabelSet("empty label".to_string()));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(DatasetError::BadLabelSet(format!("duplicate label {}", l)));
            }
        }
        let mut types = Vec::new();
        if scheme == LabelScheme::Bio {
            if !index.contains_key("O") {
                return Err(DatasetError::BadLabelSet("bio scheme requires O".to_string()));
            }
            let mut begins = BTreeSet::new();
            let mut insides = BTreeSet::new();
            for l in &labels {
                if let Some(t) = l.strip_prefix("B-") {
                    begins.insert(t.to_string());
                } else if let Some(t) = l.strip_prefix("I-") {
                    insides.insert(t.to_string());
                } else if l != "O" {
                    return Err(DatasetError::BadLabelSet(format!(
                        "{} is neither O nor B-/I- prefixed",
                        l
                    )));
                }
            }
            if begins != insides {
                return Err(DatasetError::BadLabelSet(
                    "bio scheme requires matching B-X/I-X pairs".to_string(),
                ));
            }
            for l in &labels {
                if let Some(t) = l.strip_prefix("B-") {
                    if !types.iter().any(|x| x == t) {
                        types.push(t.to_string());
                    }
                }
            }
        }
        Ok(LabelSet {
            labels,
            index,
            scheme,
            types,
        })
    }

    /// Canonical BIO set over the given entity types: O, then B-X/I-X per
    /// type in the given order.
    pub fn bio(types: &[&str]) -> Result<Self, DatasetError> {
        let mut labels = vec!["O".to_string()];
        for t in types {
            labels.push(format!("B-{}", t));
            labels.push(format!("I-{}", t));
        }
        Self::new(labels, LabelScheme::Bio)
    }

    pub fn plain(labels: &[&str]) -> Result<Self, DatasetError> {
        Self::new(labels.iter().map(|s| s.to_string()).collect(), LabelScheme::Plain)
    }

    /// Builds a canonical BIO set from tags observed in data; entity types
    /// are sorted for determinism.
    pub fn bio_from_observed<'a>(tags: impl IntoIterator<Item = &'a str>) -> Result<Self, DatasetError> {
        let mut types = BTreeSet::new();
        for t in tags {
            if let Some(x) = t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")) {
                types.insert(x.to_string());
            } else if t != "O" {
                return Err(DatasetError::BadLabelSet(format!("unexpected tag {}", t)));
            }
        }
        let refs: Vec<&str> = types.iter().map(|s| s.as_str()).collect();
        Self::bio(&refs)
    }

    /// Sorted unique labels observed in data, plain scheme.
    pub fn plain_from_observed<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self, DatasetError> {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        if set.is_empty() {
            return Err(DatasetError::BadLabelSet("no labels observed".to_string()));
        }
        Self::plain(&set.into_iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn entity_types(&self) -> &[String] {
        &self.types
    }

    /// BIO structure of the label at `idx`; everything is Outside under the
    /// plain scheme.
    pub fn bio_kind(&self, idx: usize) -> BioKind {
        if self.scheme != LabelScheme::Bio {
            return BioKind::Outside;
        }
        let l = &self.labels[idx];
        if let Some(t) = l.strip_prefix("B-") {
            BioKind::Begin(self.types.iter().position(|x| x == t).expect("validated type"))
        } else if let Some(t) = l.strip_prefix("I-") {
            BioKind::Inside(self.types.iter().position(|x| x == t).expect("validated type"))
        } else {
            BioKind::Outside
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TaggingDataset {
    pub sentences: Vec<TaggedSentence>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextExample {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, Default)]
pub struct ClassificationDataset {
    pub examples: Vec<TextExample>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelationExample {
    pub tokens: Vec<String>,
    /// end-inclusive word index ranges
    pub e1: (usize, usize),
    pub e2: (usize, usize),
    pub label: String,
}

#[derive(Debug, Clone, Default)]
pub struct RelationDataset {
    pub examples: Vec<RelationExample>,
}

/// One dependency-annotated sentence. `heads[i]` is the 1-based index of
/// token i's head, with 0 standing for the virtual root.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyTree {
    pub tokens: Vec<String>,
    pub heads: Vec<usize>,
    pub labels: Vec<String>,
    pub is_punct: Vec<bool>,
}

impl DependencyTree {
    /// Checks the tree invariants: aligned lengths, exactly one root
    /// attachment, and every token reachable from the root (no cycles).
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("empty sentence".to_string());
        }
        if self.heads.len() != n || self.labels.len() != n || self.is_punct.len() != n {
            return Err("column lengths disagree".to_string());
        }
        let roots = self.heads.iter().filter(|&&h| h == 0).count();
        if roots != 1 {
            return Err(format!("expected exactly one root attachment, found {}", roots));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h > n {
                return Err(format!("token {} has head {} beyond sentence length {}", i + 1, h, n));
            }
            if h == i + 1 {
                return Err(format!("token {} is its own head", i + 1));
            }
        }
        // walk up from every token; a cycle never reaches the root
        for start in 0..n {
            let mut cur = start;
            let mut hops = 0;
            loop {
                let h = self.heads[cur];
                if h == 0 {
                    break;
                }
                cur = h - 1;
                hops += 1;
                if hops > n {
                    return Err(format!("cycle involving token {}", start + 1));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DepDataset {
    pub sentences: Vec<DependencyTree>,
}

pub fn parse_tagging(text: &str) -> Result<TaggingDataset, DatasetError> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sentences.push(TaggedSentence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                });
            }
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| malformed(line_no, "expected token<TAB>tag"))?;
        if token.is_empty() || tag.is_empty() {
            return Err(malformed(line_no, "empty token or tag"));
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    if !tokens.is_empty() {
        sentences.push(TaggedSentence { tokens, tags });
    }
    Ok(TaggingDataset { sentences })
}

pub fn read_tagging(path: &Path) -> Result<TaggingDataset, DatasetError> {
    parse_tagging(&fs::read_to_string(path)?)
}

pub fn format_tagging(data: &TaggingDataset) -> String {
    let mut out = String::new();
    for (i, s) in data.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    out
}

pub fn write_tagging(data: &TaggingDataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, format_tagging(data))?;
    Ok(())
}

pub fn parse_dep(text: &str) -> Result<DepDataset, DatasetError> {
    let mut sentences = Vec::new();
    let mut cur = DependencyTree {
        tokens: Vec::new(),
        heads: Vec::new(),
        labels: Vec::new(),
        is_punct: Vec::new(),
    };
    let flush = |cur: &mut DependencyTree, sentences: &mut Vec<DependencyTree>| -> Result<(), DatasetError> {
        if cur.tokens.is_empty() {
            return Ok(());
        }
        let done = std::mem::replace(
            cur,
            DependencyTree {
                tokens: Vec::new(),
                heads: Vec::new(),
                labels: Vec::new(),
                is_punct: Vec::new(),
            },
        );
        done.validate().map_err(|message| DatasetError::BadTree {
            sentence: sentences.len() + 1,
            message,
        })?;
        sentences.push(done);
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut cur, &mut sentences)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(malformed(line_no, format!("expected 5 columns, got {}", cols.len())));
        }
        let idx: usize = cols[0]
            .parse()
            .map_err(|_| malformed(line_no, format!("bad token index {}", cols[0])))?;
        if idx != cur.tokens.len() + 1 {
            return Err(malformed(
                line_no,
                format!("token index {} out of order (expected {})", idx, cur.tokens.len() + 1),
            ));
        }
        let head: usize = cols[2]
            .parse()
            .map_err(|_| malformed(line_no, format!("bad head index {}", cols[2])))?;
        let is_punct = match cols[4] {
            "0" => false,
            "1" => true,
            other => return Err(malformed(line_no, format!("bad is_punct flag {}", other))),
        };
        if cols[1].is_empty() || cols[3].is_empty() {
            return Err(malformed(line_no, "empty form or label"));
        }
        cur.tokens.push(cols[1].to_string());
        cur.heads.push(head);
        cur.labels.push(cols[3].to_string());
        cur.is_punct.push(is_punct);
    }
    flush(&mut cur, &mut sentences)?;
    Ok(DepDataset { sentences })
}

pub fn read_dep(path: &Path) -> Result<DepDataset, DatasetError> {
    parse_dep(&fs::read_to_string(path)?)
}

pub fn format_dep(data: &DepDataset) -> String {
    let mut out = String::new();
    for (i, s) in data.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for t in 0..s.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                t + 1,
                s.tokens[t],
                s.heads[t],
                s.labels[t],
                if s.is_punct[t] { 1 } else { 0 }
            ));
        }
    }
    out
}

pub fn write_dep(data: &DepDataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, format_dep(data))?;
    Ok(())
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn parse_cls(text: &str) -> Result<ClassificationDataset, DatasetError> {
    let examples: Vec<TextExample> = parse_jsonl(text)?;
    for (i, ex) in examples.iter().enumerate() {
        if ex.text.trim().is_empty() {
            return Err(malformed(i + 1, "empty text"));
        }
        if ex.label.is_empty() {
            return Err(malformed(i + 1, "empty label"));
        }
    }
    Ok(ClassificationDataset { examples })
}

pub fn read_cls(path: &Path) -> Result<ClassificationDataset, DatasetError> {
    parse_cls(&fs::read_to_string(path)?)
}

pub fn format_cls(data: &ClassificationDataset) -> String {
    let mut out = String::new();
    for ex in &data.examples {
        out.push_str(&serde_json::to_string(ex).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_cls(data: &ClassificationDataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, format_cls(data))?;
    Ok(())
}

pub fn parse_rel(text: &str) -> Result<RelationDataset, DatasetError> {
    let examples: Vec<RelationExample> = parse_jsonl(text)?;
    for (i, ex) in examples.iter().enumerate() {
        let n = ex.tokens.len();
        let check = |(s, e): (usize, usize)| s <= e && e < n;
        if n == 0 {
            return Err(malformed(i + 1, "no tokens"));
        }
        if !check(ex.e1) || !check(ex.e2) {
            return Err(malformed(i + 1, "entity span out of range"));
        }
        if ex.label.is_empty() {
            return Err(malformed(i + 1, "empty label"));
        }
    }
    Ok(RelationDataset { examples })
}

pub fn read_rel(path: &Path) -> Result<RelationDataset, DatasetError> {
    parse_rel(&fs::read_to_string(path)?)
}

pub fn format_rel(data: &RelationDataset) -> String {
    let mut out = String::new();
    for ex in &data.examples {
        out.push_str(&serde_json::to_string(ex).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_rel(data: &RelationDataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, format_rel(data))?;
    Ok(())
}

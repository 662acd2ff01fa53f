//! Subword vocabularies: pair-merge training, WordPiece-style greedy
//! tokenization, overlap reports, and the one-token-per-line file format.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::SentenceList;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
/// The five core specials, in id order 0..=4.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
/// Relation-marker specials, appended to a vocabulary at finetune time.
pub const ENTITY_MARKERS: [&str; 4] = ["[E1]", "[/E1]", "[E2]", "[/E2]"];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

const CONTINUATION_PREFIX: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus contains no tokens; cannot train a vocabulary")]
    EmptyCorpus,
    #[error("target size {target} is too small; minimum feasible size is {minimum} (5 specials + {alphabet} alphabet forms)")]
    TargetTooSmall {
        target: usize,
        minimum: usize,
        alphabet: usize,
    },
    #[error("vocab file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocab file line {line}: empty entry")]
    EmptyLine { line: usize },
    #[error("vocab file line {line}: duplicate entry {token:?}")]
    DuplicateEntry { token: String, line: usize },
    #[error("vocab file missing special token {token:?} at line {line}")]
    MissingSpecial { token: String, line: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    Cased,
    Uncased,
}

impl fmt::Display for Casing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Casing::Cased => write!(f, "cased"),
            Casing::Uncased => write!(f, "uncased"),
        }
    }
}

/// Ordered subword inventory. Ids are dense 0..N-1 with the five core
/// specials pinned to ids 0..=4. Entity markers, when added, live at the end
/// of the id range so pretrained token ids stay valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    casing: Casing,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered entry list. The first five entries
    /// must be the core specials; entries must be unique and non-empty.
    pub fn from_entries(entries: Vec<String>, casing: Casing) -> Result<Self, VocabError> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if entries.get(i).map(String::as_str) != Some(*special) {
                return Err(VocabError::MissingSpecial {
                    token: special.to_string(),
                    line: i + 1,
                });
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if entry.is_empty() {
                return Err(VocabError::EmptyLine { line: i + 1 });
            }
            if index.insert(entry.clone(), i as u32).is_some() {
                return Err(VocabError::DuplicateEntry {
                    token: entry.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Vocabulary {
            entries,
            index,
            casing,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str, VocabError> {
        self.entries
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::IdOutOfRange {
                id,
                size: self.entries.len(),
            })
    }

    /// True for the five core specials and any appended entity markers.
    pub fn is_special_token(token: &str) -> bool {
        SPECIALS.contains(&token) || ENTITY_MARKERS.contains(&token)
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        self.entries
            .get(id as usize)
            .map(|t| Self::is_special_token(t))
            .unwrap_or(false)
    }

    /// Ids of every special entry currently in the vocabulary.
    pub fn special_ids(&self) -> Vec<u32> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, t)| Self::is_special_token(t))
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Non-special entries as a set, the unit of overlap comparisons.
    pub fn content_entries(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .map(String::as_str)
            .filter(|t| !Self::is_special_token(t))
            .collect()
    }

    /// Returns a copy with the four relation markers appended as specials.
    /// Idempotent: markers already present are not duplicated.
    pub fn with_entity_markers(&self) -> Vocabulary {
        let mut entries = self.entries.clone();
        for marker in ENTITY_MARKERS {
            if !self.index.contains_key(marker) {
                entries.push(marker.to_string());
            }
        }
        Vocabulary::from_entries(entries, self.casing).expect("markers cannot collide")
    }
}

/// Normalizes text for a casing mode. Both modes collapse whitespace runs to
/// a single space and trim; uncased additionally lowercases and strips
/// combining marks after NFD decomposition.
pub fn normalize(text: &str, casing: Casing) -> String {
    let folded: String = match casing {
        Casing::Cased => text.to_string(),
        Casing::Uncased => text
            .nfd()
            .filter(|c| !is_combining_mark(*c))
            .flat_map(char::to_lowercase)
            .collect(),
    };
    let mut out = String::with_capacity(folded.len());
    for part in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(part);
    }
    out
}

// ASCII punctuation plus the general punctuation block. An approximation of
// full Unicode category P, sufficient for the corpora this pipeline targets.
fn is_punct_char(c: char) -> bool {
    c.is_ascii_punctuation() || ('\u{2000}'..='\u{206F}').contains(&c)
}

/// Splits one whitespace-delimited word into units, peeling each punctuation
/// character off as its own unit.
fn split_punctuation(word: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut current = String::new();
    for c in word.chars() {
        if is_punct_char(c) {
            if !current.is_empty() {
                units.push(std::mem::take(&mut current));
            }
            units.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        units.push(current);
    }
    units
}

/// Pre-splits text into the word list tokenization operates on: normalize,
/// split on whitespace, then peel punctuation characters off as words.
pub fn pre_split(text: &str, casing: Casing) -> Vec<String> {
    normalize(text, casing)
        .split_whitespace()
        .flat_map(|w| split_punctuation(w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub token_ids: Vec<u32>,
    pub tokens: Vec<String>,
    /// One `(start, count)` per source word: its subwords occupy
    /// `tokens[start..start + count]`. Spans partition the token list.
    pub word_spans: Vec<(usize, usize)>,
}

/// Greedy longest-match segmentation of a single unit. `continuation` makes
/// even the first piece carry the "##" prefix. Returns None when some suffix
/// has no matching vocabulary entry.
fn greedy_segment(vocab: &Vocabulary, unit: &str, continuation: bool) -> Option<Vec<u32>> {
    let chars: Vec<char> = unit.chars().collect();
    if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut ids = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let prefix = if pos == 0 && !continuation {
            ""
        } else {
            CONTINUATION_PREFIX
        };
        let mut matched = None;
        for end in (pos + 1..=chars.len()).rev() {
            let candidate: String =
                prefix.chars().chain(chars[pos..end].iter().copied()).collect();
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((end, id));
                break;
            }
        }
        let (end, id) = matched?;
        ids.push(id);
        pos = end;
    }
    Some(ids)
}

/// Segments one word (which may contain punctuation) into subword ids.
/// A word equal to a special entry passes through as that single token;
/// otherwise the word is punctuation-split and each unit is segmented
/// greedily, with any failure collapsing the whole word to UNK.
fn tokenize_word(vocab: &Vocabulary, word: &str) -> Vec<u32> {
    if Vocabulary::is_special_token(word) {
        if let Some(id) = vocab.id_of(word) {
            return vec![id];
        }
    }
    let normalized = normalize(word, vocab.casing());
    let units = split_punctuation(&normalized);
    if units.is_empty() {
        return vec![UNK_ID];
    }
    let mut ids = Vec::new();
    for unit in &units {
        match greedy_segment(vocab, unit, false) {
            Some(mut unit_ids) => ids.append(&mut unit_ids),
            None => return vec![UNK_ID],
        }
    }
    ids
}

/// Tokenizes a pre-split word sequence, one span per input word. This is the
/// entry point for word-aligned tasks (tagging, parsing, marked relations).
pub fn tokenize_words(vocab: &Vocabulary, words: &[String]) -> Encoding {
    let mut token_ids = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    for word in words {
        let ids = tokenize_word(vocab, word);
        word_spans.push((token_ids.len(), ids.len()));
        token_ids.extend(ids);
    }
    let tokens = token_ids
        .iter()
        .map(|&id| vocab.entries[id as usize].clone())
        .collect();
    Encoding {
        token_ids,
        tokens,
        word_spans,
    }
}

/// Tokenizes free text: normalization, whitespace/punctuation pre-split,
/// then greedy longest-match per word.
pub fn tokenize(vocab: &Vocabulary, text: &str) -> Encoding {
    let words = pre_split(text, vocab.casing());
    tokenize_words(vocab, &words)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Non-special entry counts.
    pub size_a: usize,
    pub size_b: usize,
    pub shared: usize,
    /// shared / size_a; both sizes are reported so Jaccard is recoverable.
    pub overlap_fraction: f64,
}

pub fn vocab_overlap(a: &Vocabulary, b: &Vocabulary) -> OverlapReport {
    let ea = a.content_entries();
    let eb = b.content_entries();
    let shared = ea.intersection(&eb).count();
    let size_a = ea.len();
    let size_b = eb.len();
    let overlap_fraction = if size_a == 0 {
        0.0
    } else {
        shared as f64 / size_a as f64
    };
    OverlapReport {
        size_a,
        size_b,
        shared,
        overlap_fraction,
    }
}

/// Trains a vocabulary by iterative pair merging: start from the corpus
/// character alphabet (word-initial forms plus "##" continuation forms) and
/// repeatedly merge the most frequent adjacent symbol pair until the target
/// size is reached or no pair clears `min_frequency`. Frequency ties break
/// lexicographically on the merged string, making the result deterministic.
pub fn train_vocab<I>(
    corpus: I,
    target_size: usize,
    min_frequency: u64,
    casing: Casing,
) -> Result<Vocabulary, VocabError>
where
    I: IntoIterator<Item = SentenceList>,
{
    // Word frequencies over the normalized, pre-split corpus.
    let mut word_freqs: BTreeMap<String, u64> = BTreeMap::new();
    for list in corpus {
        for sentence in &list.sentences {
            for word in pre_split(sentence, casing) {
                *word_freqs.entry(word).or_insert(0) += 1;
            }
        }
    }
    if word_freqs.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }

    // Symbol sequences: first char plain, the rest continuation-prefixed.
    let mut sequences: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .map(|(word, &freq)| {
            let symbols = word
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION_PREFIX}{c}")
                    }
                })
                .collect();
            (symbols, freq)
        })
        .collect();

    let alphabet: BTreeSet<String> = sequences
        .iter()
        .flat_map(|(symbols, _)| symbols.iter().cloned())
        .collect();
    let minimum = SPECIALS.len() + alphabet.len();
    if target_size < minimum {
        return Err(VocabError::TargetTooSmall {
            target: target_size,
            minimum,
            alphabet: alphabet.len(),
        });
    }

    let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    entries.extend(alphabet.iter().cloned());
    let mut known: HashSet<String> = entries.iter().cloned().collect();

    while entries.len() < target_size {
        let mut pair_freqs: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, freq) in &sequences {
            for pair in symbols.windows(2) {
                *pair_freqs
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // Highest frequency wins; ties prefer the lexicographically smallest
        // merged surface form.
        let best = pair_freqs
            .iter()
            .filter(|(_, &freq)| freq >= min_frequency)
            .map(|((l, r), &freq)| (freq, merge_surface(l, r), l.clone(), r.clone()))
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
        let Some((_, merged, left, right)) = best else {
            break;
        };
        for (symbols, _) in &mut sequences {
            merge_in_place(symbols, &left, &right, &merged);
        }
        if known.insert(merged.clone()) {
            entries.push(merged);
        }
    }

    Vocabulary::from_entries(entries, casing)
}

/// Surface form of a merged pair: continuation status comes from the left
/// symbol; the right symbol's prefix is interior and drops out.
fn merge_surface(left: &str, right: &str) -> String {
    let mut merged = left.to_string();
    merged.push_str(right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right));
    merged
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Writes the vocabulary as one token per line, LF endings, UTF-8. Line
/// number minus one is the token id; the file is byte-stable.
pub fn save_vocab(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<(), VocabError> {
    let mut out = String::new();
    for entry in &vocab.entries {
        out.push_str(entry);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a one-token-per-line vocabulary file. The casing mode is not part
/// of the file format and must be supplied by the caller.
pub fn load_vocab(path: impl AsRef<Path>, casing: Casing) -> Result<Vocabulary, VocabError> {
    let content = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            return Err(VocabError::EmptyLine { line: i + 1 });
        }
        entries.push(line.to_string());
    }
    Vocabulary::from_entries(entries, casing)
}

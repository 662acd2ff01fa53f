//! Document ingestion, rule-based sentence splitting, and corpus statistics.
//!
//! Corpora arrive as JSONL, one document per line. Splitting is a fixed,
//! deterministic rule set so the whole pipeline stays reproducible without an
//! external sentence model.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open corpus file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSONL at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate document id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("document at line {line} has neither title nor text")]
    EmptyDocument { line: usize },
}

/// Domain of origin for a document. Unknown strings are rejected at ingestion
/// so stats never silently lump typos into a bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Biomedical,
    ComputerScience,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub body: String,
    pub domain_tag: DomainTag,
}

impl Document {
    /// Sentence view of the document: the title (split on its own, so an
    /// unterminated title never merges into the body) followed by the body.
    pub fn sentences(&self) -> SentenceList {
        let mut sentences = split_sentences(&self.title);
        sentences.extend(split_sentences(&self.body));
        SentenceList {
            document_id: self.id.clone(),
            sentences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceList {
    pub document_id: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CorpusStats {
    pub document_count: u64,
    pub sentence_count: u64,
    pub token_count: u64,
    pub mean_sentences_per_doc: f64,
    pub mean_tokens_per_doc: f64,
}

#[derive(Deserialize)]
struct RawDocument {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    domain: Option<String>,
}

/// Streaming iterator over the documents of a JSONL corpus file.
///
/// Documents larger than memory are not a concern, but corpora are: this never
/// holds more than one line at a time. Duplicate ids are detected across the
/// whole stream.
pub struct JsonlDocuments {
    reader: BufReader<File>,
    seen_ids: HashSet<String>,
    line_no: usize,
    done: bool,
}

impl Iterator for JsonlDocuments {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut line = String::new();
        loop {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) => {
                    self.done = true;
                    return None;
                }
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(CorpusError::Io(e)));
                }
            }
            self.line_no += 1;
            if !line.trim().is_empty() {
                break;
            }
        }
        let item = self.parse_line(&line);
        if item.is_err() {
            self.done = true;
        }
        Some(item)
    }
}

impl JsonlDocuments {
    fn parse_line(&mut self, line: &str) -> Result<Document, CorpusError> {
        let raw: RawDocument =
            serde_json::from_str(line.trim_end()).map_err(|e| CorpusError::MalformedLine {
                line: self.line_no,
                message: e.to_string(),
            })?;
        if raw.id.is_empty() {
            return Err(CorpusError::MalformedLine {
                line: self.line_no,
                message: "empty id".into(),
            });
        }
        if raw.title.is_empty() && raw.text.is_empty() {
            return Err(CorpusError::EmptyDocument { line: self.line_no });
        }
        if !self.seen_ids.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: raw.id,
                line: self.line_no,
            });
        }
        let domain_tag = match raw.domain.as_deref() {
            None => DomainTag::Other,
            Some("biomedical") => DomainTag::Biomedical,
            Some("computer_science") => DomainTag::ComputerScience,
            Some("other") => DomainTag::Other,
            Some(other) => {
                return Err(CorpusError::MalformedLine {
                    line: self.line_no,
                    message: format!("unknown domain {other:?}"),
                })
            }
        };
        Ok(Document {
            id: raw.id,
            title: raw.title,
            body: raw.text,
            domain_tag,
        })
    }
}

/// Opens a JSONL corpus for streaming ingestion.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<JsonlDocuments, CorpusError> {
    let file = File::open(path.as_ref())?;
    Ok(JsonlDocuments {
        reader: BufReader::new(file),
        seen_ids: HashSet::new(),
        line_no: 0,
        done: false,
    })
}

/// Reads a whole corpus into memory, used by stages that need random access
/// (sentence-pair generation samples across documents).
pub fn read_all_documents(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    ingest_jsonl(path)?.collect()
}

// Dot-terminated words that do not end a sentence. Matched case-insensitively
// against the text ending at the candidate dot.
const PROTECTED_ABBREVIATIONS: &[&str] = &[
    "et al.", "e.g.", "i.e.", "cf.", "etc.", "vs.", "fig.", "figs.", "eq.", "eqs.", "sec.",
    "no.", "vol.", "pp.", "ca.", "resp.", "approx.", "dr.", "mr.", "ms.", "mrs.", "prof.",
];

/// Splits text into sentences with deterministic rules: a sentence ends at a
/// run of `.`/`!`/`?` that is followed by whitespace and then an uppercase
/// letter or digit. A final `.` is protected when it closes a known
/// abbreviation or a single-letter initial ("J. Smith").
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if !is_terminator(chars[i]) {
            i += 1;
            continue;
        }
        // Absorb a terminator run ("?!", "...").
        let mut end = i;
        while end + 1 < chars.len() && is_terminator(chars[end + 1]) {
            end += 1;
        }
        let boundary = boundary_after(&chars, end) && !(chars[end] == '.' && protected_dot(&chars, end));
        if boundary {
            push_sentence(&chars[start..=end], &mut sentences);
            start = end + 1;
        }
        i = end + 1;
    }
    if start < chars.len() {
        push_sentence(&chars[start..], &mut sentences);
    }
    sentences
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn boundary_after(chars: &[char], end: usize) -> bool {
    let mut k = end + 1;
    if k >= chars.len() || !chars[k].is_whitespace() {
        return false;
    }
    while k < chars.len() && chars[k].is_whitespace() {
        k += 1;
    }
    k < chars.len() && (chars[k].is_uppercase() || chars[k].is_ascii_digit())
}

fn protected_dot(chars: &[char], dot: usize) -> bool {
    // Single-letter initial: exactly one alphabetic char before the dot,
    // preceded by a non-alphanumeric character or the start of text.
    if dot >= 1 && chars[dot - 1].is_alphabetic() {
        let before_ok = dot < 2 || !chars[dot - 2].is_alphanumeric();
        if before_ok {
            return true;
        }
    }
    let prefix: String = chars[..=dot].iter().collect::<String>().to_lowercase();
    for abbr in PROTECTED_ABBREVIATIONS {
        if let Some(head) = prefix.strip_suffix(abbr) {
            let boundary = head
                .chars()
                .last()
                .map(|c| !c.is_alphanumeric())
                .unwrap_or(true);
            if boundary {
                return true;
            }
        }
    }
    false
}

fn push_sentence(chars: &[char], out: &mut Vec<String>) {
    let s: String = chars.iter().collect();
    let trimmed = s.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
}

/// Incremental statistics accumulator. Merging two accumulators equals
/// feeding both document sets to one, in any order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    pub document_count: u64,
    pub sentence_count: u64,
    pub token_count: u64,
}

impl StatsAccumulator {
    pub fn add_document(&mut self, doc: &Document) {
        self.document_count += 1;
        for sentence in doc.sentences().sentences {
            self.sentence_count += 1;
            self.token_count += sentence.split_whitespace().count() as u64;
        }
    }

    pub fn merge(self, other: StatsAccumulator) -> StatsAccumulator {
        StatsAccumulator {
            document_count: self.document_count + other.document_count,
            sentence_count: self.sentence_count + other.sentence_count,
            token_count: self.token_count + other.token_count,
        }
    }

    pub fn finish(self) -> CorpusStats {
        let docs = self.document_count;
        let ratio = |n: u64| if docs == 0 { 0.0 } else { n as f64 / docs as f64 };
        CorpusStats {
            document_count: docs,
            sentence_count: self.sentence_count,
            token_count: self.token_count,
            mean_sentences_per_doc: ratio(self.sentence_count),
            mean_tokens_per_doc: ratio(self.token_count),
        }
    }
}

/// Single-pass statistics over a document stream.
pub fn corpus_stats<I>(docs: I) -> Result<CorpusStats, CorpusError>
where
    I: IntoIterator<Item = Result<Document, CorpusError>>,
{
    let mut acc = StatsAccumulator::default();
    for doc in docs {
        acc.add_document(&doc?);
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn doc(id: &str, title: &str, body: &str) -> Document {
        Document {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            domain_tag: DomainTag::Other,
        }
    }

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingests_two_documents_in_order() {
        let f = write_corpus(&[
            r#"{"id":"a","title":"T1","text":"Body one."}"#,
            r#"{"id":"b","title":"T2","text":"Body two."}"#,
        ]);
        let docs: Vec<_> = ingest_jsonl(f.path())
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "a");
        assert_eq!(docs[1].id, "b");
    }

    #[test]
    fn missing_title_and_text_errors_with_line() {
        let f = write_corpus(&[r#"{"id":"ok","title":"t"}"#, r#"{"id":"x"}"#]);
        let results: Vec<_> = ingest_jsonl(f.path()).unwrap().collect();
        assert!(results[0].is_ok());
        match &results[1] {
            Err(CorpusError::EmptyDocument { line }) => assert_eq!(*line, 2),
            other => panic!("expected EmptyDocument, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let docs: Vec<_> = ingest_jsonl(f.path()).unwrap().collect();
        assert!(docs.is_empty());
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let f = write_corpus(&[
            r#"{"id":"a","title":"x","text":"y"}"#,
            r#"{"id":"a","title":"x","text":"y"}"#,
        ]);
        let results: Vec<_> = ingest_jsonl(f.path()).unwrap().collect();
        match &results[1] {
            Err(CorpusError::DuplicateId { id, line }) => {
                assert_eq!(id, "a");
                assert_eq!(*line, 2);
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_carries_line_number() {
        let f = write_corpus(&[r#"{"id":"a","title":"x","text":"y"}"#, "{not json"]);
        let results: Vec<_> = ingest_jsonl(f.path()).unwrap().collect();
        match &results[1] {
            Err(CorpusError::MalformedLine { line, .. }) => assert_eq!(*line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn domain_parses_and_defaults() {
        let f = write_corpus(&[
            r#"{"id":"a","title":"t","text":"x","domain":"biomedical"}"#,
            r#"{"id":"b","title":"t","text":"x","domain":"computer_science"}"#,
            r#"{"id":"c","title":"t","text":"x"}"#,
        ]);
        let docs: Vec<_> = ingest_jsonl(f.path())
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(docs[0].domain_tag, DomainTag::Biomedical);
        assert_eq!(docs[1].domain_tag, DomainTag::ComputerScience);
        assert_eq!(docs[2].domain_tag, DomainTag::Other);
    }

    #[test]
    fn splits_two_plain_sentences() {
        assert_eq!(
            split_sentences("We train a model. It works."),
            vec!["We train a model.", "It works."]
        );
    }

    #[test]
    fn empty_and_unterminated_inputs() {
        assert_eq!(split_sentences(""), Vec::<String>::new());
        assert_eq!(split_sentences("No terminator here"), vec!["No terminator here"]);
        assert_eq!(split_sentences("   \n\t "), Vec::<String>::new());
    }

    #[test]
    fn protects_abbreviations_and_initials() {
        assert_eq!(
            split_sentences("Results follow Smith et al. In contrast, ours differ."),
            vec!["Results follow Smith et al. In contrast, ours differ."]
        );
        assert_eq!(
            split_sentences("See Fig. 3 for details. The trend holds."),
            vec!["See Fig. 3 for details.", "The trend holds."]
        );
        assert_eq!(
            split_sentences("J. Smith agreed. We proceeded."),
            vec!["J. Smith agreed.", "We proceeded."]
        );
    }

    #[test]
    fn abbreviation_match_requires_word_boundary() {
        // "...metal." ends with "tal." but not the abbreviation "et al.".
        assert_eq!(
            split_sentences("The sample was metal. It conducted."),
            vec!["The sample was metal.", "It conducted."]
        );
    }

    #[test]
    fn no_split_before_lowercase() {
        assert_eq!(
            split_sentences("approx. half failed. the rest passed"),
            vec!["approx. half failed. the rest passed"]
        );
    }

    #[test]
    fn terminator_runs_stay_together() {
        assert_eq!(
            split_sentences("Really?! Yes. Indeed..."),
            vec!["Really?!", "Yes.", "Indeed..."]
        );
    }

    #[test]
    fn stats_means_are_exact_ratios() {
        let d1 = doc("a", "", "One. Two good. Three more here.");
        let d2 = doc("b", "", "Alpha beta. Gamma delta here. Some more. Also this. Final one.");
        assert_eq!(d1.sentences().sentences.len(), 3);
        assert_eq!(d2.sentences().sentences.len(), 5);
        let stats = corpus_stats([Ok(d1), Ok(d2)]).unwrap();
        assert_eq!(stats.document_count, 2);
        assert_eq!(stats.sentence_count, 8);
        assert_eq!(stats.mean_sentences_per_doc, 4.0);
    }

    #[test]
    fn stats_empty_stream_is_all_zeros() {
        let stats = corpus_stats(std::iter::empty()).unwrap();
        assert_eq!(stats, CorpusStats::default());
        assert_eq!(stats.mean_sentences_per_doc, 0.0);
        assert_eq!(stats.mean_tokens_per_doc, 0.0);
    }

    #[test]
    fn stats_count_whitespace_tokens() {
        let stats = corpus_stats([Ok(doc("a", "", "a b c"))]).unwrap();
        assert_eq!(stats.token_count, 3);
        assert_eq!(stats.mean_tokens_per_doc, 3.0);
    }

    #[test]
    fn title_sentences_do_not_merge_into_body() {
        let d = doc("a", "A Study Of Things", "We ran tests. They passed.");
        let s = d.sentences().sentences;
        assert_eq!(
            s,
            vec!["A Study Of Things", "We ran tests.", "They passed."]
        );
    }

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let docs: Vec<Document> = (0..6)
            .map(|i| doc(&format!("d{i}"), "T", "One two. Three four five."))
            .collect();
        let mut whole = StatsAccumulator::default();
        for d in &docs {
            whole.add_document(d);
        }
        let mut left = StatsAccumulator::default();
        let mut right = StatsAccumulator::default();
        for d in &docs[..2] {
            left.add_document(d);
        }
        for d in &docs[2..] {
            right.add_document(d);
        }
        assert_eq!(whole, left.merge(right));
        assert_eq!(whole, right.merge(left));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn strip_ws(s: &str) -> String {
            s.chars().filter(|c| !c.is_whitespace()).collect()
        }

        proptest! {
            #[test]
            fn no_character_loss(text in "[ A-Za-z0-9.!?]{0,80}") {
                let joined: String = split_sentences(&text).join("");
                prop_assert_eq!(strip_ws(&joined), strip_ws(&text));
            }

            #[test]
            fn idempotent_per_sentence(text in "[ A-Za-z0-9.!?,]{0,80}") {
                for sentence in split_sentences(&text) {
                    let again = split_sentences(&sentence);
                    prop_assert_eq!(again, vec![sentence.clone()]);
                }
            }

            #[test]
            fn no_empty_sentences(text in ".{0,120}") {
                for sentence in split_sentences(&text) {
                    prop_assert!(!sentence.trim().is_empty());
                }
            }
        }
    }
}

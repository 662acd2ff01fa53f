//! `build-vocab` and `vocab-overlap`.

use std::path::PathBuf;

use serde::Serialize;

use deskbert_core::corpus::{ingest_jsonl, CorpusStats, StatsAccumulator};
use deskbert_core::vocab::{
    load_vocab, save_vocab, train_vocab, vocab_overlap, Casing, VocabError,
};

use crate::settings::parse_casing;
use crate::{print_json, require_file, CliError};

#[derive(Debug, clap::Args)]
pub struct BuildVocabArgs {
    /// JSONL corpus, one document per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target vocabulary size, specials included
    #[arg(long, default_value_t = 30_000)]
    pub size: usize,
    #[arg(long, value_parser = parse_casing, default_value = "uncased")]
    pub casing: Casing,
    /// Drop words rarer than this before deriving subwords
    #[arg(long, default_value_t = 1)]
    pub min_frequency: u64,
    /// Where to write the vocabulary, one token per line
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct BuildVocabReport {
    vocab_path: String,
    size: usize,
    casing: Casing,
    corpus: CorpusStats,
}

pub fn build_vocab(args: &BuildVocabArgs) -> Result<(), CliError> {
    require_file(&args.corpus, "corpus")?;
    let mut acc = StatsAccumulator::default();
    let mut lists = Vec::new();
    for doc in ingest_jsonl(&args.corpus).map_err(CliError::runtime)? {
        let doc = doc.map_err(CliError::runtime)?;
        acc.add_document(&doc);
        lists.push(doc.sentences());
    }
    let vocab = train_vocab(lists, args.size, args.min_frequency, args.casing).map_err(|e| {
        match e {
            // asking for fewer slots than the alphabet needs is a flag error
            VocabError::TargetTooSmall { .. } => CliError::config(e.to_string()),
            other => CliError::runtime(other),
        }
    })?;
    save_vocab(&vocab, &args.out).map_err(CliError::runtime)?;
    print_json(&BuildVocabReport {
        vocab_path: args.out.display().to_string(),
        size: vocab.len(),
        casing: vocab.casing(),
        corpus: acc.finish(),
    })
}

#[derive(Debug, clap::Args)]
pub struct OverlapArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

pub fn overlap(args: &OverlapArgs) -> Result<(), CliError> {
    require_file(&args.a, "vocabulary a")?;
    require_file(&args.b, "vocabulary b")?;
    // casing only matters for lookups, not for comparing stored entries
    let a = load_vocab(&args.a, Casing::Uncased).map_err(CliError::runtime)?;
    let b = load_vocab(&args.b, Casing::Uncased).map_err(CliError::runtime)?;
    print_json(&vocab_overlap(&a, &b))
}

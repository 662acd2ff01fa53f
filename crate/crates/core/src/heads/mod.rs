//! Task architectures on top of the encoder: [CLS]-vector classification,
//! relation classification with inserted entity markers, CRF sequence
//! tagging with first-subword emissions, and biaffine dependency parsing.

pub mod arborescence;
pub mod biaffine;
pub mod crf;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::{DependencyTree, LabelScheme, LabelSet};
use crate::encoder::{encode, EncoderConfig, EncoderError, IntMatrix};
use crate::tensor::ops;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, TensorError};
use crate::util::{derive_seed, rng_from_seed};
use crate::vocab::{tokenize, tokenize_words, Vocabulary, CLS_ID, PAD_ID, SEP_ID};

pub use arborescence::{arborescence_score, max_arborescence, max_single_root_arborescence};
pub use biaffine::{
    biaffine_label_logits, biaffine_loss, biaffine_scores, decode_biaffine, BiaffineParams,
    BiaffineScores, ARC_DIM,
};
pub use crf::{crf_decode, crf_gold_score, crf_log_partition, crf_nll, CrfParams};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("crf: {0}")]
    Crf(String),
    #[error("sequence of {len} tokens exceeds the {max}-position encoder: split the input into windows")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Wraps the two entity spans (end-inclusive word indices) in marker
/// tokens, shifting everything after each insertion point rightward.
pub fn mark_entities(
    tokens: &[String],
    e1: (usize, usize),
    e2: (usize, usize),
) -> Result<Vec<String>, HeadError> {
    for (name, span) in [("e1", e1), ("e2", e2)] {
        if span.0 > span.1 || span.1 >= tokens.len() {
            return Err(HeadError::Input(format!(
                "{} span {:?} out of range for {} tokens",
                name,
                span,
                tokens.len()
            )));
        }
    }
    if e1.0 <= e2.1 && e2.0 <= e1.1 {
        return Err(HeadError::Input(format!("spans {:?} and {:?} overlap", e1, e2)));
    }
    let mut out = Vec::with_capacity(tokens.len() + 4);
    for (i, tok) in tokens.iter().enumerate() {
        if i == e1.0 {
            out.push("[E1]".to_string());
        }
        if i == e2.0 {
            out.push("[E2]".to_string());
        }
        out.push(tok.clone());
        if i == e1.1 {
            out.push("[/E1]".to_string());
        }
        if i == e2.1 {
            out.push("[/E2]".to_string());
        }
    }
    Ok(out)
}

/// Tokenizes free text into a [CLS] ... [SEP] id row, truncating the middle
/// to fit the position budget.
pub fn text_to_ids(
    vocab: &Vocabulary,
    text: &str,
    max_positions: usize,
) -> Result<Vec<u32>, HeadError> {
    if max_positions < 3 {
        return Err(HeadError::Input("position budget below 3".to_string()));
    }
    let enc = tokenize(vocab, text);
    if enc.token_ids.is_empty() {
        return Err(HeadError::Input("empty text".to_string()));
    }
    let keep = enc.token_ids.len().min(max_positions - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(&enc.token_ids[..keep]);
    ids.push(SEP_ID);
    Ok(ids)
}

/// Tokenizes a word sequence, returning the id row and each word's first
/// subword position within it. Refuses sequences over the position budget.
pub fn words_to_ids(
    vocab: &Vocabulary,
    words: &[String],
    max_positions: usize,
) -> Result<(Vec<u32>, Vec<usize>), HeadError> {
    if words.is_empty() {
        return Err(HeadError::Input("empty word sequence".to_string()));
    }
    let enc = tokenize_words(vocab, words);
    let len = enc.token_ids.len() + 2;
    if len > max_positions {
        return Err(HeadError::TooLong {
            len,
            max: max_positions,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS_ID);
    ids.extend_from_slice(&enc.token_ids);
    ids.push(SEP_ID);
    let first: Vec<usize> = enc.word_spans.iter().map(|&(start, _)| start + 1).collect();
    Ok((ids, first))
}

/// Encodes a batch of variable-length id rows (single-segment, padded).
pub fn encode_rows<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    tape: &Tape<T>,
    rows: &[Vec<u32>],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<crate::encoder::EncodeOutput<T>, HeadError> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(HeadError::Input("empty batch or empty row".to_string()));
    }
    let width = rows.iter().map(|r| r.len()).max().unwrap();
    let b = rows.len();
    let mut tokens = IntMatrix::filled(b, width, PAD_ID);
    let segments = IntMatrix::filled(b, width, 0);
    let mut mask = IntMatrix::filled(b, width, 0);
    for (j, row) in rows.iter().enumerate() {
        for (p, &t) in row.iter().enumerate() {
            tokens.set(j, p, t);
            mask.set(j, p, 1);
        }
    }
    Ok(encode(config, enc_params, tape, &tokens, &segments, &mask, train, rng)?)
}

/// Top-layer [CLS] vectors for a batch of id rows, shape [batch, hidden].
pub fn cls_vectors<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    tape: &Tape<T>,
    rows: &[Vec<u32>],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, HeadError> {
    let out = encode_rows(config, enc_params, tape, rows, train, rng)?;
    let width = out.sequence.shape()[1];
    let starts: Vec<usize> = (0..rows.len()).map(|j| j * width).collect();
    Ok(ops::index_rows(tape, &out.flat, &starts)?)
}

pub fn init_cls_head<T: Scalar>(hidden: usize, num_labels: usize, seed: u64) -> ParamSet<T> {
    let mut params = ParamSet::new();
    let mut rng = rng_from_seed(derive_seed(seed, "cls.w"));
    params.insert("cls.w", Tensor::trunc_normal(vec![hidden, num_labels], 0.02, &mut rng));
    params.insert("cls.b", Tensor::zeros(vec![num_labels]));
    params
}

/// Classification logits [batch, labels] from the [CLS] vectors.
pub fn cls_logits<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    head: &ParamSet<T>,
    tape: &Tape<T>,
    rows: &[Vec<u32>],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, HeadError> {
    let vecs = cls_vectors(config, enc_params, tape, rows, train, rng)?;
    let w = head.get("cls.w").map_err(|e| HeadError::Input(e.to_string()))?;
    let b = head.get("cls.b").map_err(|e| HeadError::Input(e.to_string()))?;
    Ok(ops::add_bias(tape, &ops::matmul(tape, &vecs, w)?, b)?)
}

/// Inference-mode label distribution for one text.
pub fn classify_cls<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    head: &ParamSet<T>,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Vec<f64>, HeadError> {
    let ids = text_to_ids(vocab, text, config.max_positions)?;
    let tape = Tape::inference();
    let mut rng = rng_from_seed(0);
    let logits = cls_logits(config, enc_params, head, &tape, &[ids], false, &mut rng)?;
    let probs = ops::softmax(&tape, &logits, 1)?;
    Ok(probs.to_vec().iter().map(|v| v.to_f64()).collect())
}

/// Emission projection plus CRF transitions for a tagging task. The
/// transition matrix lives in the parameter set as "crf.trans" and is
/// shared with the returned CrfParams.
pub fn init_tag_head<T: Scalar>(
    hidden: usize,
    labels: &LabelSet,
    seed: u64,
) -> Result<(ParamSet<T>, CrfParams<T>), HeadError> {
    let crf = match labels.scheme() {
        LabelScheme::Bio => CrfParams::bio(labels)?,
        LabelScheme::Plain => CrfParams::unconstrained(labels.len())?,
    };
    let mut params = ParamSet::new();
    let mut rng = rng_from_seed(derive_seed(seed, "emit.w"));
    params.insert("emit.w", Tensor::trunc_normal(vec![hidden, labels.len()], 0.02, &mut rng));
    params.insert("emit.b", Tensor::zeros(vec![labels.len()]));
    params.insert("crf.trans", crf.transitions.clone());
    Ok((params, crf))
}

/// Per-word vectors [num_words, hidden]: encode the subword sequence and
/// gather each word's first subword.
pub fn word_vectors<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    tape: &Tape<T>,
    vocab: &Vocabulary,
    words: &[String],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, HeadError> {
    let (ids, first) = words_to_ids(vocab, words, config.max_positions)?;
    let out = encode_rows(config, enc_params, tape, &[ids], train, rng)?;
    Ok(ops::index_rows(tape, &out.flat, &first)?)
}

/// Per-word emission scores [num_words, num_labels].
pub fn tag_emissions<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    head: &ParamSet<T>,
    tape: &Tape<T>,
    vocab: &Vocabulary,
    words: &[String],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, HeadError> {
    let vecs = word_vectors(config, enc_params, tape, vocab, words, train, rng)?;
    let w = head.get("emit.w").map_err(|e| HeadError::Input(e.to_string()))?;
    let b = head.get("emit.b").map_err(|e| HeadError::Input(e.to_string()))?;
    Ok(ops::add_bias(tape, &ops::matmul(tape, &vecs, w)?, b)?)
}

/// CRF negative log-likelihood of the gold label path for one sentence.
pub fn tag_loss<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    head: &ParamSet<T>,
    crf: &CrfParams<T>,
    tape: &Tape<T>,
    vocab: &Vocabulary,
    words: &[String],
    gold: &[usize],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, HeadError> {
    let emissions = tag_emissions(config, enc_params, head, tape, vocab, words, train, rng)?;
    crf_nll(tape, &emissions, crf, gold)
}

/// Inference-mode tagging: one label per input word.
pub fn tag_sequence<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    head: &ParamSet<T>,
    crf: &CrfParams<T>,
    vocab: &Vocabulary,
    words: &[String],
    labels: &LabelSet,
) -> Result<Vec<String>, HeadError> {
    let tape = Tape::inference();
    let mut rng = rng_from_seed(0);
    let emissions = tag_emissions(config, enc_params, head, &tape, vocab, words, false, &mut rng)?;
    let path = crf_decode(&emissions, crf)?;
    Ok(path.iter().map(|&y| labels.label(y).to_string()).collect())
}

/// Arc + label cross-entropy for one sentence against its gold tree.
pub fn parse_loss<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    bi: &BiaffineParams<T>,
    tape: &Tape<T>,
    vocab: &Vocabulary,
    words: &[String],
    gold_heads: &[usize],
    gold_labels: &[u32],
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, HeadError> {
    let vecs = word_vectors(config, enc_params, tape, vocab, words, train, rng)?;
    biaffine_loss(tape, bi, &vecs, gold_heads, gold_labels)
}

/// Inference-mode parse: decodes the best single-root tree and labels each
/// selected arc. Punctuation flags pass through from the input.
pub fn parse_biaffine<T: Scalar>(
    config: &EncoderConfig,
    enc_params: &ParamSet<T>,
    bi: &BiaffineParams<T>,
    vocab: &Vocabulary,
    words: &[String],
    is_punct: &[bool],
    labels: &LabelSet,
) -> Result<DependencyTree, HeadError> {
    if is_punct.len() != words.len() {
        return Err(HeadError::Input("punctuation flags do not match tokens".to_string()));
    }
    let tape = Tape::inference();
    let mut rng = rng_from_seed(0);
    let vecs = word_vectors(config, enc_params, &tape, vocab, words, false, &mut rng)?;
    let scores = biaffine_scores(&tape, bi, &vecs)?;
    let (heads, label_ids) = decode_biaffine(&tape, bi, &scores)?;
    Ok(DependencyTree {
        tokens: words.to_vec(),
        heads,
        labels: label_ids.iter().map(|&l| labels.label(l).to_string()).collect(),
        is_punct: is_punct.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::trainer::Adam;
    use crate::vocab::Casing;

    fn strs(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn test_vocab(extra: &[&str]) -> Vocabulary {
        let mut entries: Vec<String> = crate::vocab::SPECIALS.iter().map(|s| s.to_string()).collect();
        entries.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_entries(entries, Casing::Uncased).unwrap()
    }

    fn tiny_config(vocab: usize, max_pos: usize) -> EncoderConfig {
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
    fn markers_wrap_both_spans() {
        let tokens = strs(&["a", "b", "c"]);
        assert_eq!(
            mark_entities(&tokens, (0, 0), (2, 2)).unwrap(),
            strs(&["[E1]", "a", "[/E1]", "b", "[E2]", "c", "[/E2]"])
        );
        assert_eq!(
            mark_entities(&tokens[..2], (0, 0), (1, 1)).unwrap(),
            strs(&["[E1]", "a", "[/E1]", "[E2]", "b", "[/E2]"])
        );
        // second entity may precede the first in the sentence
        assert_eq!(
            mark_entities(&tokens, (2, 2), (0, 1)).unwrap(),
            strs(&["[E2]", "a", "b", "[/E2]", "[E1]", "c", "[/E1]"])
        );
    }

    #[test]
    fn markers_reject_bad_spans() {
        let tokens = strs(&["a", "b", "c"]);
        assert!(mark_entities(&tokens, (0, 1), (1, 2)).is_err());
        assert!(mark_entities(&tokens, (0, 0), (2, 3)).is_err());
        assert!(mark_entities(&tokens, (1, 0), (2, 2)).is_err());
        // length grows by exactly four on every success
        for (a, b) in [((0usize, 0usize), (1usize, 2usize)), ((1, 1), (2, 2)), ((0, 1), (2, 2))] {
            assert_eq!(mark_entities(&tokens, a, b).unwrap().len(), tokens.len() + 4);
        }
    }

    #[test]
    fn text_rows_truncate_keeping_frame() {
        let vocab = test_vocab(&["word"]);
        let text = vec!["word"; 40].join(" ");
        let ids = text_to_ids(&vocab, &text, 16).unwrap();
        assert_eq!(ids.len(), 16);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(*ids.last().unwrap(), SEP_ID);
        assert!(text_to_ids(&vocab, "", 16).is_err());
    }

    #[test]
    fn word_rows_report_overflow() {
        let vocab = test_vocab(&["word"]);
        let words = strs(&["word"; 20]);
        match words_to_ids(&vocab, &words, 16) {
            Err(HeadError::TooLong { len, max }) => {
                assert_eq!(len, 22);
                assert_eq!(max, 16);
            }
            other => panic!("expected overflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let vocab = test_vocab(&["alpha", "beta", "gamma"]);
        let cfg = tiny_config(vocab.len(), 16);
        let model = init_params::<f32>(&cfg, 1).unwrap();
        let head = init_cls_head::<f32>(cfg.hidden_size, 4, 2);
        let probs = classify_cls(&cfg, &model.params, &head, &vocab, "alpha beta gamma").unwrap();
        assert_eq!(probs.len(), 4);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn untrained_heads_are_near_uniform_on_average() {
        let vocab = test_vocab(&["alpha", "beta"]);
        let cfg = tiny_config(vocab.len(), 16);
        let model = init_params::<f32>(&cfg, 3).unwrap();
        let mut mean = [0.0f64; 3];
        let inits = 30;
        for seed in 0..inits {
            let head = init_cls_head::<f32>(cfg.hidden_size, 3, 100 + seed);
            let probs = classify_cls(&cfg, &model.params, &head, &vocab, "alpha beta").unwrap();
            for (m, p) in mean.iter_mut().zip(&probs) {
                *m += p / inits as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.15, "mean prob {}", m);
        }
    }

    #[test]
    fn separable_texts_reach_perfect_training_accuracy() {
        let vocab = test_vocab(&["good", "bad", "item", "one", "two"]);
        let cfg = tiny_config(vocab.len(), 16);
        let model = init_params::<f32>(&cfg, 4).unwrap();
        let head = init_cls_head::<f32>(cfg.hidden_size, 2, 5);
        let texts = [
            ("good item one", 0u32),
            ("good two", 0),
            ("item good", 0),
            ("bad item one", 1),
            ("bad two", 1),
            ("item bad", 1),
        ];
        let rows: Vec<Vec<u32>> = texts
            .iter()
            .map(|(t, _)| text_to_ids(&vocab, t, cfg.max_positions).unwrap())
            .collect();
        let targets: Vec<u32> = texts.iter().map(|&(_, l)| l).collect();
        let mut all = ParamSet::new();
        for (n, t) in model.params.iter() {
            all.insert(n.clone(), t.clone());
        }
        for (n, t) in head.iter() {
            all.insert(format!("head.{}", n), t.clone());
        }
        let mut opt = Adam::new();
        let mut rng = rng_from_seed(6);
        for _ in 0..80 {
            let tape = Tape::new();
            let logits = cls_logits(&cfg, &model.params, &head, &tape, &rows, true, &mut rng).unwrap();
            let loss = ops::cross_entropy(&tape, &logits, &targets, None).unwrap();
            tape.backward(&loss).unwrap();
            opt.step(&all, 2e-3).unwrap();
        }
        for (text, label) in texts {
            let probs = classify_cls(&cfg, &model.params, &head, &vocab, text).unwrap();
            let pred = if probs[1] > probs[0] { 1 } else { 0 };
            assert_eq!(pred, label, "{} -> {:?}", text, probs);
        }
    }

    #[test]
    fn tagging_aligns_one_label_per_word() {
        // "alice" splits into two subwords; output stays word-aligned
        let vocab = test_vocab(&["al", "##ice", "runs", "fast", "today", "and"]);
        let cfg = tiny_config(vocab.len(), 24);
        let model = init_params::<f32>(&cfg, 7).unwrap();
        let labels = LabelSet::bio(&["PER"]).unwrap();
        let (head, crf) = init_tag_head::<f32>(cfg.hidden_size, &labels, 8).unwrap();
        let words = strs(&["alice", "runs", "fast", "today", "and"]);
        let enc = tokenize_words(&vocab, &words);
        assert_eq!(enc.token_ids.len(), 6, "premise: alice -> 2 subwords");
        let tags = tag_sequence(&cfg, &model.params, &head, &crf, &vocab, &words, &labels).unwrap();
        assert_eq!(tags.len(), 5);
        for t in &tags {
            assert!(labels.index_of(t).is_some());
        }
    }

    #[test]
    fn tag_loss_is_nonnegative() {
        let vocab = test_vocab(&["al", "##ice", "runs"]);
        let cfg = tiny_config(vocab.len(), 16);
        let model = init_params::<f32>(&cfg, 9).unwrap();
        let labels = LabelSet::bio(&["PER"]).unwrap();
        let (head, crf) = init_tag_head::<f32>(cfg.hidden_size, &labels, 10).unwrap();
        let words = strs(&["alice", "runs"]);
        let gold = vec![labels.index_of("B-PER").unwrap(), labels.index_of("O").unwrap()];
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let loss = tag_loss(&cfg, &model.params, &head, &crf, &tape, &vocab, &words, &gold, false, &mut rng)
            .unwrap()
            .item()
            .unwrap();
        assert!(loss >= 0.0);
    }

    #[test]
    fn toy_ner_set_is_memorized() {
        let vocab = test_vocab(&["john", "mary", "al", "##ice", "runs", "sees", "the", "dog", "fast"]);
        let cfg = tiny_config(vocab.len(), 24);
        let model = init_params::<f32>(&cfg, 11).unwrap();
        let labels = LabelSet::bio(&["PER"]).unwrap();
        let (head, crf) = init_tag_head::<f32>(cfg.hidden_size, &labels, 12).unwrap();
        let o = labels.index_of("O").unwrap();
        let b = labels.index_of("B-PER").unwrap();
        let sentences: Vec<(Vec<String>, Vec<usize>)> = vec![
            (strs(&["john", "runs"]), vec![b, o]),
            (strs(&["mary", "sees", "john"]), vec![b, o, b]),
            (strs(&["alice", "runs", "fast"]), vec![b, o, o]),
            (strs(&["the", "dog", "runs"]), vec![o, o, o]),
            (strs(&["john", "sees", "the", "dog"]), vec![b, o, o, o]),
            (strs(&["mary", "runs"]), vec![b, o]),
            (strs(&["the", "dog", "sees", "mary"]), vec![o, o, o, b]),
            (strs(&["alice", "sees", "alice"]), vec![b, o, b]),
            (strs(&["runs", "fast"]), vec![o, o]),
            (strs(&["john", "mary", "runs"]), vec![b, b, o]),
        ];
        let mut all = ParamSet::new();
        for (n, t) in model.params.iter() {
            all.insert(n.clone(), t.clone());
        }
        for (n, t) in head.iter() {
            all.insert(format!("head.{}", n), t.clone());
        }
        let mut opt = Adam::new();
        let mut rng = rng_from_seed(13);
        for _ in 0..120 {
            for (words, gold) in &sentences {
                let tape = Tape::new();
                let loss =
                    tag_loss(&cfg, &model.params, &head, &crf, &tape, &vocab, words, gold, true, &mut rng)
                        .unwrap();
                tape.backward(&loss).unwrap();
            }
            opt.step(&all, 1e-3).unwrap();
        }
        for (words, gold) in &sentences {
            let tags = tag_sequence(&cfg, &model.params, &head, &crf, &vocab, words, &labels).unwrap();
            let want: Vec<String> = gold.iter().map(|&y| labels.label(y).to_string()).collect();
            assert_eq!(tags, want, "sentence {:?}", words);
        }
    }

    #[test]
    fn parser_produces_valid_labeled_trees() {
        let vocab = test_vocab(&["the", "dog", "runs", "al", "##ice"]);
        let cfg = tiny_config(vocab.len(), 24);
        let model = init_params::<f32>(&cfg, 14).unwrap();
        let labels = LabelSet::plain(&["root", "det", "nsubj"]).unwrap();
        let bi = BiaffineParams::<f32>::new(cfg.hidden_size, labels.len(), 15).unwrap();
        let words = strs(&["the", "dog", "runs", "alice"]);
        let tree = parse_biaffine(
            &cfg,
            &model.params,
            &bi,
            &vocab,
            &words,
            &[false, false, false, false],
            &labels,
        )
        .unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.tokens, words);
        assert_eq!(tree.labels.len(), 4);
        assert!(tree.labels.iter().all(|l| labels.index_of(l).is_some()));
    }

    #[test]
    fn parse_loss_decreases_when_training() {
        let vocab = test_vocab(&["the", "dog", "runs"]);
        let cfg = tiny_config(vocab.len(), 16);
        let model = init_params::<f32>(&cfg, 16).unwrap();
        let labels = LabelSet::plain(&["root", "det", "nsubj"]).unwrap();
        let bi = BiaffineParams::<f32>::new(cfg.hidden_size, labels.len(), 17).unwrap();
        let words = strs(&["the", "dog", "runs"]);
        let gold_heads = vec![2usize, 3, 0];
        let gold_labels = vec![1u32, 2, 0];
        let mut all = ParamSet::new();
        for (n, t) in model.params.iter() {
            all.insert(n.clone(), t.clone());
        }
        for (n, t) in bi.params.iter() {
            all.insert(format!("bi.{}", n), t.clone());
        }
        let mut opt = Adam::new();
        let mut rng = rng_from_seed(18);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..60 {
            let tape = Tape::new();
            let loss = parse_loss(
                &cfg, &model.params, &bi, &tape, &vocab, &words, &gold_heads, &gold_labels, true,
                &mut rng,
            )
            .unwrap();
            let v = loss.item().unwrap().to_f64();
            if step == 0 {
                first = v;
            }
            last = v;
            tape.backward(&loss).unwrap();
            opt.step(&all, 1e-3).unwrap();
        }
        assert!(last < first, "{} -> {}", first, last);
        let tree = parse_biaffine(&cfg, &model.params, &bi, &vocab, &words, &[false; 3], &labels).unwrap();
        assert_eq!(tree.heads, gold_heads);
    }
}

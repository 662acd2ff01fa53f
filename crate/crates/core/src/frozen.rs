//! Frozen-embedding baselines: the encoder runs in evaluation mode as a
//! fixed feature extractor, and small BiLSTM task models train on top.
//! No gradient ever reaches an encoder parameter.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;

use crate::datasets::{DependencyTree, LabelScheme, LabelSet};
use crate::encoder::EncoderConfig;
use crate::heads::{
    biaffine_loss, biaffine_scores, decode_biaffine, crf_decode, crf_nll, word_vectors,
    BiaffineParams, BiaffineScores, CrfParams, HeadError,
};
use crate::tensor::ops;
use crate::tensor::{params_checksum, ParamSet, Scalar, Tape, Tensor};
use crate::util::{derive_seed, rng_from_seed};
use crate::vocab::{pre_split, Vocabulary};

pub const LSTM_HIDDEN: usize = 200;
pub const LSTM_LAYERS: usize = 2;
pub const MLP_HIDDEN: usize = 200;
pub const FROZEN_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    None,
    PerSentence,
}

type CacheKey = (String, String, Vec<String>);

/// Wraps an encoder as a fixed word-vector source. Vectors come out
/// detached, so downstream training cannot touch encoder weights.
pub struct FrozenEmbedder<T: Scalar> {
    config: EncoderConfig,
    params: ParamSet<T>,
    policy: CachePolicy,
    checksum: String,
    cache: Mutex<HashMap<CacheKey, (Vec<usize>, Vec<T>)>>,
    calls: AtomicUsize,
}

impl<T: Scalar> FrozenEmbedder<T> {
    pub fn new(config: EncoderConfig, params: ParamSet<T>, policy: CachePolicy) -> Self {
        let checksum = params_checksum(&params);
        FrozenEmbedder {
            config,
            params,
            policy,
            checksum,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encoder_params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// How many times the encoder has actually run (cache hits excluded).
    pub fn encoder_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// One detached vector per word, shape [len, hidden].
    pub fn embed(&self, vocab: &Vocabulary, words: &[String]) -> Result<Tensor<T>, HeadError> {
        let key = (
            self.checksum.clone(),
            self.config.casing.to_string(),
            words.to_vec(),
        );
        if self.policy == CachePolicy::PerSentence {
            let cache = self.cache.lock().unwrap();
            if let Some((shape, data)) = cache.get(&key) {
                return Ok(Tensor::from_vec(shape.clone(), data.clone())?);
            }
        }
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let vecs = word_vectors(&self.config, &self.params, &tape, vocab, words, false, &mut rng)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let out = vecs.detach();
        if self.policy == CachePolicy::PerSentence {
            let mut cache = self.cache.lock().unwrap();
            cache
                .entry(key)
                .or_insert_with(|| (out.shape().to_vec(), out.to_vec()));
        }
        Ok(out)
    }
}

pub fn embed_frozen<T: Scalar>(
    embedder: &FrozenEmbedder<T>,
    vocab: &Vocabulary,
    words: &[String],
) -> Result<Tensor<T>, HeadError> {
    embedder.embed(vocab, words)
}

/// Stacked bidirectional LSTM. Forward and backward passes run separately
/// per layer and their outputs concatenate, so the output width is twice
/// the per-direction hidden size.
pub struct BiLstmStack<T: Scalar> {
    pub params: ParamSet<T>,
    input_size: usize,
    hidden_per_direction: usize,
    num_layers: usize,
}

impl<T: Scalar> BiLstmStack<T> {
    pub fn new(input_size: usize, seed: u64) -> Result<Self, HeadError> {
        Self::with_dims(input_size, LSTM_HIDDEN, LSTM_LAYERS, seed)
    }

    pub fn with_dims(
        input_size: usize,
        hidden_per_direction: usize,
        num_layers: usize,
        seed: u64,
    ) -> Result<Self, HeadError> {
        if input_size == 0 || hidden_per_direction == 0 || num_layers == 0 {
            return Err(HeadError::Input("lstm dimensions must be positive".to_string()));
        }
        let mut params = ParamSet::new();
        let h = hidden_per_direction;
        for layer in 0..num_layers {
            let in_size = if layer == 0 { input_size } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                let prefix = format!("lstm.{:02}.{}", layer, dir);
                let wx_name = format!("{}.wx", prefix);
                let mut rng = rng_from_seed(derive_seed(seed, &wx_name));
                params.insert(wx_name, Tensor::trunc_normal(vec![in_size, 4 * h], 0.02, &mut rng));
                let wh_name = format!("{}.wh", prefix);
                let mut rng = rng_from_seed(derive_seed(seed, &wh_name));
                params.insert(wh_name, Tensor::trunc_normal(vec![h, 4 * h], 0.02, &mut rng));
                // forget-gate bias starts at one so early cells retain state
                let mut bias = vec![0.0; 4 * h];
                bias[h..2 * h].fill(1.0);
                params.insert(format!("{}.b", prefix), Tensor::from_f64s(vec![4 * h], &bias)?);
            }
        }
        Ok(BiLstmStack {
            params,
            input_size,
            hidden_per_direction,
            num_layers,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn output_size(&self) -> usize {
        2 * self.hidden_per_direction
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn direction(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        layer: usize,
        dir: &str,
        reverse: bool,
    ) -> Result<Tensor<T>, HeadError> {
        let len = x.shape()[0];
        let h = self.hidden_per_direction;
        let prefix = format!("lstm.{:02}.{}", layer, dir);
        let wx = self.params.get(&format!("{}.wx", prefix))?;
        let wh = self.params.get(&format!("{}.wh", prefix))?;
        let b = self.params.get(&format!("{}.b", prefix))?;
        let mut h_prev = Tensor::zeros(vec![1, h]);
        let mut c_prev = Tensor::zeros(vec![1, h]);
        let mut states = Vec::with_capacity(len);
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let x_t = ops::narrow(tape, x, 0, t, 1)?;
            let from_x = ops::matmul(tape, &x_t, wx)?;
            let from_h = ops::matmul(tape, &h_prev, wh)?;
            let pre = ops::add_bias(tape, &ops::add(tape, &from_x, &from_h)?, b)?;
            let i = ops::sigmoid(tape, &ops::narrow(tape, &pre, 1, 0, h)?)?;
            let f = ops::sigmoid(tape, &ops::narrow(tape, &pre, 1, h, h)?)?;
            let g = ops::tanh(tape, &ops::narrow(tape, &pre, 1, 2 * h, h)?)?;
            let o = ops::sigmoid(tape, &ops::narrow(tape, &pre, 1, 3 * h, h)?)?;
            let c = ops::add(tape, &ops::mul(tape, &f, &c_prev)?, &ops::mul(tape, &i, &g)?)?;
            let h_t = ops::mul(tape, &o, &ops::tanh(tape, &c)?)?;
            states.push(h_t.clone());
            h_prev = h_t;
            c_prev = c;
        }
        if reverse {
            states.reverse();
        }
        Ok(ops::concat(tape, &states, 0)?)
    }

    /// Runs the stack over [len, input] vectors, returning [len, output].
    /// Dropout hits the inputs and each inter-layer boundary at train time.
    pub fn run(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        dropout: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        if x.ndim() != 2 || x.shape()[1] != self.input_size {
            return Err(HeadError::Input(format!(
                "expected [len, {}] inputs, got {:?}",
                self.input_size,
                x.shape()
            )));
        }
        if x.shape()[0] == 0 {
            return Err(HeadError::Input("empty sequence".to_string()));
        }
        let mut cur = ops::dropout(tape, x, dropout, train, rng)?;
        for layer in 0..self.num_layers {
            if layer > 0 {
                cur = ops::dropout(tape, &cur, dropout, train, rng)?;
            }
            let fwd = self.direction(tape, &cur, layer, "fwd", false)?;
            let bwd = self.direction(tape, &cur, layer, "bwd", true)?;
            cur = ops::concat(tape, &[fwd, bwd], 1)?;
        }
        Ok(cur)
    }
}

/// Sentence classifier: BiLSTM, then an MLP over the concatenated first
/// and last output vectors.
pub struct FrozenClassifier<T: Scalar> {
    pub stack: BiLstmStack<T>,
    pub params: ParamSet<T>,
    pub dropout: f64,
    num_labels: usize,
}

impl<T: Scalar> FrozenClassifier<T> {
    pub fn new(input_size: usize, num_labels: usize, seed: u64) -> Result<Self, HeadError> {
        Self::with_dims(input_size, LSTM_HIDDEN, LSTM_LAYERS, MLP_HIDDEN, num_labels, seed)
    }

    pub fn with_dims(
        input_size: usize,
        lstm_hidden: usize,
        lstm_layers: usize,
        mlp_hidden: usize,
        num_labels: usize,
        seed: u64,
    ) -> Result<Self, HeadError> {
        if mlp_hidden == 0 || num_labels == 0 {
            return Err(HeadError::Input("mlp dimensions must be positive".to_string()));
        }
        let stack = BiLstmStack::with_dims(input_size, lstm_hidden, lstm_layers, derive_seed(seed, "lstm"))?;
        let feature = 2 * stack.output_size();
        let mut params = ParamSet::new();
        let mut rng = rng_from_seed(derive_seed(seed, "mlp.w1"));
        params.insert("mlp.w1", Tensor::trunc_normal(vec![feature, mlp_hidden], 0.02, &mut rng));
        params.insert("mlp.b1", Tensor::zeros(vec![mlp_hidden]));
        let mut rng = rng_from_seed(derive_seed(seed, "mlp.w2"));
        params.insert("mlp.w2", Tensor::trunc_normal(vec![mlp_hidden, num_labels], 0.02, &mut rng));
        params.insert("mlp.b2", Tensor::zeros(vec![num_labels]));
        Ok(FrozenClassifier {
            stack,
            params,
            dropout: FROZEN_DROPOUT,
            num_labels,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Everything the optimizer should touch; encoder params excluded.
    pub fn trainable_params(&self) -> ParamSet<T> {
        let mut all = ParamSet::new();
        for (name, t) in self.stack.params.iter() {
            all.insert(name.clone(), t.clone());
        }
        for (name, t) in self.params.iter() {
            all.insert(name.clone(), t.clone());
        }
        all
    }

    /// [1, 2·output] feature: BiLSTM output at the first and last position.
    pub fn features(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        text: &str,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let words = pre_split(text, embedder.config().casing);
        self.features_words(embedder, tape, vocab, &words, train, rng)
    }

    /// Same feature over an already tokenized sentence, e.g. one carrying
    /// entity markers that a fresh pre-split would mangle.
    pub fn features_words(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        if words.is_empty() {
            return Err(HeadError::Input("empty text".to_string()));
        }
        let vecs = embedder.embed(vocab, words)?;
        let out = self.stack.run(tape, &vecs, self.dropout, train, rng)?;
        let len = out.shape()[0];
        let first = ops::narrow(tape, &out, 0, 0, 1)?;
        let last = ops::narrow(tape, &out, 0, len - 1, 1)?;
        Ok(ops::concat(tape, &[first, last], 1)?)
    }

    pub fn logits(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        text: &str,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let words = pre_split(text, embedder.config().casing);
        self.logits_words(embedder, tape, vocab, &words, train, rng)
    }

    pub fn logits_words(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let feature = self.features_words(embedder, tape, vocab, words, train, rng)?;
        let w1 = self.params.get("mlp.w1")?;
        let b1 = self.params.get("mlp.b1")?;
        let w2 = self.params.get("mlp.w2")?;
        let b2 = self.params.get("mlp.b2")?;
        let hidden = ops::tanh(tape, &ops::add_bias(tape, &ops::matmul(tape, &feature, w1)?, b1)?)?;
        let hidden = ops::dropout(tape, &hidden, self.dropout, train, rng)?;
        Ok(ops::add_bias(tape, &ops::matmul(tape, &hidden, w2)?, b2)?)
    }

    pub fn loss(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        text: &str,
        label: u32,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let logits = self.logits(embedder, tape, vocab, text, train, rng)?;
        Ok(ops::cross_entropy(tape, &logits, &[label], None)?)
    }

    pub fn loss_words(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        label: u32,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let logits = self.logits_words(embedder, tape, vocab, words, train, rng)?;
        Ok(ops::cross_entropy(tape, &logits, &[label], None)?)
    }

    pub fn distribution(
        &self,
        embedder: &FrozenEmbedder<T>,
        vocab: &Vocabulary,
        text: &str,
    ) -> Result<Vec<f64>, HeadError> {
        let words = pre_split(text, embedder.config().casing);
        self.distribution_words(embedder, vocab, &words)
    }

    pub fn distribution_words(
        &self,
        embedder: &FrozenEmbedder<T>,
        vocab: &Vocabulary,
        words: &[String],
    ) -> Result<Vec<f64>, HeadError> {
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let logits = self.logits_words(embedder, &tape, vocab, words, false, &mut rng)?;
        let probs = ops::softmax(&tape, &logits, 1)?;
        Ok(probs.to_vec().iter().map(|v| v.to_f64()).collect())
    }
}

pub fn frozen_classify<T: Scalar>(
    embedder: &FrozenEmbedder<T>,
    model: &FrozenClassifier<T>,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Vec<f64>, HeadError> {
    model.distribution(embedder, vocab, text)
}

/// Sequence tagger: BiLSTM emissions into the shared CRF machinery.
pub struct FrozenTagger<T: Scalar> {
    pub stack: BiLstmStack<T>,
    pub params: ParamSet<T>,
    pub crf: CrfParams<T>,
    pub dropout: f64,
}

impl<T: Scalar> FrozenTagger<T> {
    pub fn new(input_size: usize, labels: &LabelSet, seed: u64) -> Result<Self, HeadError> {
        Self::with_dims(input_size, LSTM_HIDDEN, LSTM_LAYERS, labels, seed)
    }

    pub fn with_dims(
        input_size: usize,
        lstm_hidden: usize,
        lstm_layers: usize,
        labels: &LabelSet,
        seed: u64,
    ) -> Result<Self, HeadError> {
        let stack = BiLstmStack::with_dims(input_size, lstm_hidden, lstm_layers, derive_seed(seed, "lstm"))?;
        let crf = match labels.scheme() {
            LabelScheme::Bio => CrfParams::bio(labels)?,
            LabelScheme::Plain => CrfParams::unconstrained(labels.len())?,
        };
        let mut params = ParamSet::new();
        let mut rng = rng_from_seed(derive_seed(seed, "emit.w"));
        params.insert(
            "emit.w",
            Tensor::trunc_normal(vec![stack.output_size(), labels.len()], 0.02, &mut rng),
        );
        params.insert("emit.b", Tensor::zeros(vec![labels.len()]));
        params.insert("crf.trans", crf.transitions.clone());
        Ok(FrozenTagger {
            stack,
            params,
            crf,
            dropout: FROZEN_DROPOUT,
        })
    }

    pub fn trainable_params(&self) -> ParamSet<T> {
        let mut all = ParamSet::new();
        for (name, t) in self.stack.params.iter() {
            all.insert(name.clone(), t.clone());
        }
        for (name, t) in self.params.iter() {
            all.insert(name.clone(), t.clone());
        }
        all
    }

    pub fn emissions(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let vecs = embedder.embed(vocab, words)?;
        let out = self.stack.run(tape, &vecs, self.dropout, train, rng)?;
        let w = self.params.get("emit.w")?;
        let b = self.params.get("emit.b")?;
        Ok(ops::add_bias(tape, &ops::matmul(tape, &out, w)?, b)?)
    }

    pub fn loss(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        gold: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let emissions = self.emissions(embedder, tape, vocab, words, train, rng)?;
        crf_nll(tape, &emissions, &self.crf, gold)
    }

    pub fn tag(
        &self,
        embedder: &FrozenEmbedder<T>,
        vocab: &Vocabulary,
        words: &[String],
        labels: &LabelSet,
    ) -> Result<Vec<String>, HeadError> {
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let emissions = self.emissions(embedder, &tape, vocab, words, false, &mut rng)?;
        let path = crf_decode(&emissions, &self.crf)?;
        Ok(path.iter().map(|&y| labels.label(y).to_string()).collect())
    }
}

pub fn frozen_tag<T: Scalar>(
    embedder: &FrozenEmbedder<T>,
    model: &FrozenTagger<T>,
    vocab: &Vocabulary,
    words: &[String],
    labels: &LabelSet,
) -> Result<Vec<String>, HeadError> {
    model.tag(embedder, vocab, words, labels)
}

/// Dependency parser: BiLSTM vectors into the shared biaffine scorer.
pub struct FrozenParser<T: Scalar> {
    pub stack: BiLstmStack<T>,
    pub bi: BiaffineParams<T>,
    pub dropout: f64,
}

impl<T: Scalar> FrozenParser<T> {
    pub fn new(input_size: usize, num_labels: usize, seed: u64) -> Result<Self, HeadError> {
        let stack = BiLstmStack::with_dims(input_size, LSTM_HIDDEN, LSTM_LAYERS, derive_seed(seed, "lstm"))?;
        let bi = BiaffineParams::new(stack.output_size(), num_labels, derive_seed(seed, "biaffine"))?;
        Ok(FrozenParser {
            stack,
            bi,
            dropout: FROZEN_DROPOUT,
        })
    }

    pub fn with_dims(
        input_size: usize,
        lstm_hidden: usize,
        lstm_layers: usize,
        arc_dim: usize,
        num_labels: usize,
        seed: u64,
    ) -> Result<Self, HeadError> {
        let stack = BiLstmStack::with_dims(input_size, lstm_hidden, lstm_layers, derive_seed(seed, "lstm"))?;
        let bi = BiaffineParams::with_dims(
            stack.output_size(),
            num_labels,
            arc_dim,
            derive_seed(seed, "biaffine"),
        )?;
        Ok(FrozenParser {
            stack,
            bi,
            dropout: FROZEN_DROPOUT,
        })
    }

    pub fn trainable_params(&self) -> ParamSet<T> {
        let mut all = ParamSet::new();
        for (name, t) in self.stack.params.iter() {
            all.insert(name.clone(), t.clone());
        }
        for (name, t) in self.bi.params.iter() {
            all.insert(name.clone(), t.clone());
        }
        all
    }

    pub fn scores(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BiaffineScores<T>, HeadError> {
        let vecs = embedder.embed(vocab, words)?;
        let out = self.stack.run(tape, &vecs, self.dropout, train, rng)?;
        biaffine_scores(tape, &self.bi, &out)
    }

    pub fn loss(
        &self,
        embedder: &FrozenEmbedder<T>,
        tape: &Tape<T>,
        vocab: &Vocabulary,
        words: &[String],
        gold_heads: &[usize],
        gold_labels: &[u32],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>, HeadError> {
        let vecs = embedder.embed(vocab, words)?;
        let out = self.stack.run(tape, &vecs, self.dropout, train, rng)?;
        biaffine_loss(tape, &self.bi, &out, gold_heads, gold_labels)
    }

    pub fn parse(
        &self,
        embedder: &FrozenEmbedder<T>,
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
        let scores = self.scores(embedder, &tape, vocab, words, false, &mut rng)?;
        let (heads, label_ids) = decode_biaffine(&tape, &self.bi, &scores)?;
        Ok(DependencyTree {
            tokens: words.to_vec(),
            heads,
            labels: label_ids.iter().map(|&l| labels.label(l).to_string()).collect(),
            is_punct: is_punct.to_vec(),
        })
    }
}

pub fn frozen_parse<T: Scalar>(
    embedder: &FrozenEmbedder<T>,
    model: &FrozenParser<T>,
    vocab: &Vocabulary,
    words: &[String],
    is_punct: &[bool],
    labels: &LabelSet,
) -> Result<DependencyTree, HeadError> {
    model.parse(embedder, vocab, words, is_punct, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::heads::max_single_root_arborescence;
    use crate::tensor::grad_check_named;
    use crate::trainer::Adam;
    use crate::vocab::{Casing, SPECIALS};

    fn strs(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn test_vocab(extra: &[&str]) -> Vocabulary {
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        entries.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_entries(entries, Casing::Uncased).unwrap()
    }

    fn tiny_config(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_size: 16,
            num_heads: 2,
            ff_size: 32,
            max_positions: 24,
            vocab_size: vocab,
            dropout: 0.1,
            casing: Casing::Uncased,
        }
    }

    fn embedder_f32(vocab: &Vocabulary, policy: CachePolicy, seed: u64) -> FrozenEmbedder<f32> {
        let cfg = tiny_config(vocab.len());
        let model = init_params::<f32>(&cfg, seed).unwrap();
        FrozenEmbedder::new(cfg, model.params, policy)
    }

    fn embedder_f64(vocab: &Vocabulary, seed: u64) -> FrozenEmbedder<f64> {
        let cfg = tiny_config(vocab.len());
        let model = init_params::<f64>(&cfg, seed).unwrap();
        FrozenEmbedder::new(cfg, model.params, CachePolicy::PerSentence)
    }

    #[test]
    fn repeat_embeddings_are_bitwise_equal() {
        let vocab = test_vocab(&["the", "dog", "runs"]);
        let words = strs(&["the", "dog", "runs"]);
        let uncached = embedder_f32(&vocab, CachePolicy::None, 1);
        let a = uncached.embed(&vocab, &words).unwrap();
        let b = uncached.embed(&vocab, &words).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        assert_eq!(uncached.encoder_calls(), 2);

        let cached = embedder_f32(&vocab, CachePolicy::PerSentence, 1);
        let c = cached.embed(&vocab, &words).unwrap();
        let d = cached.embed(&vocab, &words).unwrap();
        assert_eq!(c.to_vec(), d.to_vec());
        assert_eq!(c.to_vec(), a.to_vec());
        assert_eq!(cached.encoder_calls(), 1, "second embed must hit the cache");
        assert_eq!(c.shape(), &[3, 16]);
        assert!(!c.requires_grad());
    }

    #[test]
    fn cached_and_uncached_predictions_agree() {
        let vocab = test_vocab(&["good", "bad", "item"]);
        let cfg = tiny_config(vocab.len());
        let enc = init_params::<f32>(&cfg, 2).unwrap();
        let cached = FrozenEmbedder::new(cfg.clone(), enc.params.share(), CachePolicy::PerSentence);
        let uncached = FrozenEmbedder::new(cfg, enc.params, CachePolicy::None);
        let model = FrozenClassifier::<f32>::with_dims(16, 8, 2, 8, 3, 3).unwrap();
        for text in ["good item", "bad item", "item"] {
            let a = model.distribution(&cached, &vocab, text).unwrap();
            let a2 = model.distribution(&cached, &vocab, text).unwrap();
            let b = model.distribution(&uncached, &vocab, text).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, a2);
        }
    }

    #[test]
    fn classifier_feature_is_first_and_last_output() {
        let vocab = test_vocab(&["one", "two", "three"]);
        let embedder = embedder_f32(&vocab, CachePolicy::PerSentence, 4);
        let model = FrozenClassifier::<f32>::new(16, 3, 5).unwrap();
        let tape = Tape::inference();
        let mut rng = rng_from_seed(0);
        let feature = model
            .features(&embedder, &tape, &vocab, "one two three", false, &mut rng)
            .unwrap();
        assert_eq!(feature.shape(), &[1, 800]);

        // one-word sentence: first and last BiLSTM vectors coincide
        let single = model
            .features(&embedder, &tape, &vocab, "one", false, &mut rng)
            .unwrap();
        let flat = single.to_vec();
        assert_eq!(flat[..400], flat[400..]);
        assert!(model.features(&embedder, &tape, &vocab, "", false, &mut rng).is_err());
    }

    #[test]
    fn training_never_touches_encoder_weights() {
        let vocab = test_vocab(&["good", "bad", "item"]);
        let embedder = embedder_f32(&vocab, CachePolicy::PerSentence, 6);
        let before = embedder.checksum().to_string();
        let probe = embedder.embed(&vocab, &strs(&["good", "item"])).unwrap().to_vec();
        let model = FrozenClassifier::<f32>::with_dims(16, 8, 2, 8, 2, 7).unwrap();
        let all = model.trainable_params();
        let mut opt = Adam::new();
        let mut rng = rng_from_seed(8);
        for _ in 0..5 {
            for (text, label) in [("good item", 0u32), ("bad item", 1)] {
                let tape = Tape::new();
                let loss = model.loss(&embedder, &tape, &vocab, text, label, true, &mut rng).unwrap();
                tape.backward(&loss).unwrap();
                opt.step(&all, 1e-3).unwrap();
            }
        }
        assert_eq!(params_checksum(embedder.encoder_params()), before);
        let fresh = FrozenEmbedder::new(
            embedder.config().clone(),
            embedder.encoder_params().share(),
            CachePolicy::None,
        );
        assert_eq!(fresh.embed(&vocab, &strs(&["good", "item"])).unwrap().to_vec(), probe);
    }

    #[test]
    fn toy_sentiment_set_is_memorized() {
        let vocab = test_vocab(&["good", "bad", "item", "movie", "book", "one", "two"]);
        let embedder = embedder_f32(&vocab, CachePolicy::PerSentence, 9);
        let model = FrozenClassifier::<f32>::with_dims(16, 24, 2, 16, 2, 10).unwrap();
        let fillers = ["item", "movie", "book", "one", "two"];
        let mut examples = Vec::new();
        for (i, filler) in fillers.iter().enumerate() {
            examples.push((format!("good {}", filler), 0u32));
            examples.push((format!("{} good", filler), 0u32));
            examples.push((format!("bad {}", filler), 1u32));
            examples.push((format!("{} bad {}", filler, fillers[(i + 1) % fillers.len()]), 1u32));
        }
        assert_eq!(examples.len(), 20);
        let all = model.trainable_params();
        let mut opt = Adam::new();
        let mut rng = rng_from_seed(11);
        let mut perfect = false;
        for _ in 0..40 {
            for (text, label) in &examples {
                let tape = Tape::new();
                let loss = model.loss(&embedder, &tape, &vocab, text, *label, true, &mut rng).unwrap();
                tape.backward(&loss).unwrap();
            }
            opt.step(&all, 2e-3).unwrap();
            let correct = examples
                .iter()
                .filter(|(text, label)| {
                    let probs = model.distribution(&embedder, &vocab, text).unwrap();
                    let pred = if probs[1] > probs[0] { 1 } else { 0 };
                    pred == *label
                })
                .count();
            if correct == examples.len() {
                perfect = true;
                break;
            }
        }
        assert!(perfect, "20-example toy set not memorized in 40 epochs");
    }

    #[test]
    fn tagger_stays_word_aligned_and_well_formed() {
        let vocab = test_vocab(&["al", "##ice", "sees", "the", "dog"]);
        let embedder = embedder_f32(&vocab, CachePolicy::PerSentence, 12);
        let labels = LabelSet::bio(&["PER", "ORG"]).unwrap();
        let words = strs(&["alice", "sees", "the", "dog"]);
        for seed in 0..200 {
            let model = FrozenTagger::<f32>::with_dims(16, 6, 1, &labels, seed).unwrap();
            let tags = model.tag(&embedder, &vocab, &words, &labels).unwrap();
            assert_eq!(tags.len(), words.len());
            let mut prev: Option<&str> = None;
            for tag in &tags {
                if let Some(rest) = tag.strip_prefix("I-") {
                    let ok = prev
                        .map(|p| p == format!("B-{}", rest) || p == format!("I-{}", rest))
                        .unwrap_or(false);
                    assert!(ok, "dangling {} in {:?}", tag, tags);
                }
                prev = Some(tag);
            }
        }
    }

    #[test]
    fn tag_decode_matches_exhaustive_search() {
        let vocab = test_vocab(&["al", "##ice", "sees", "the", "dog", "runs"]);
        let embedder = embedder_f64(&vocab, 13);
        let labels = LabelSet::bio(&["PER"]).unwrap();
        let all_words = strs(&["alice", "sees", "the", "dog", "runs"]);
        for seed in 0..20 {
            for len in 1..=5usize {
                let words = all_words[..len].to_vec();
                let model = FrozenTagger::<f64>::with_dims(16, 5, 1, &labels, 100 + seed).unwrap();
                let tape = Tape::inference();
                let mut rng = rng_from_seed(0);
                let emissions = model
                    .emissions(&embedder, &tape, &vocab, &words, false, &mut rng)
                    .unwrap();
                let em = emissions.to_vec();
                let l = labels.len();
                let m = model.crf.masked();
                let s = model.crf.num_states();
                let start = model.crf.start_state();
                let end = model.crf.end_state();
                let score_of = |path: &[usize]| {
                    let mut total = m[start * s + path[0]];
                    for (t, &y) in path.iter().enumerate() {
                        total += em[t * l + y];
                        if t + 1 < path.len() {
                            total += m[y * s + path[t + 1]];
                        }
                    }
                    total + m[path[path.len() - 1] * s + end]
                };
                let mut best = f64::NEG_INFINITY;
                let mut path = vec![0usize; len];
                loop {
                    let sc = score_of(&path);
                    if sc > best {
                        best = sc;
                    }
                    let mut pos = len;
                    while pos > 0 {
                        path[pos - 1] += 1;
                        if path[pos - 1] < l {
                            break;
                        }
                        path[pos - 1] = 0;
                        pos -= 1;
                    }
                    if pos == 0 {
                        break;
                    }
                }
                let decoded = model.tag(&embedder, &vocab, &words, &labels).unwrap();
                let decoded_ids: Vec<usize> =
                    decoded.iter().map(|t| labels.index_of(t).unwrap()).collect();
                assert!(
                    (score_of(&decoded_ids) - best).abs() < 1e-9,
                    "decoded {:?} scores {} vs best {}",
                    decoded,
                    score_of(&decoded_ids),
                    best
                );
            }
        }
    }

    #[test]
    fn parser_matches_arborescence_decoder() {
        let vocab = test_vocab(&["al", "##ice", "sees", "the", "dog", "runs"]);
        let embedder = embedder_f64(&vocab, 14);
        let labels = LabelSet::plain(&["root", "dep"]).unwrap();
        let all_words = strs(&["alice", "sees", "the", "dog", "runs"]);
        for seed in 0..10 {
            for len in 1..=5usize {
                let words = all_words[..len].to_vec();
                let model = FrozenParser::<f64>::with_dims(16, 5, 1, 4, labels.len(), 200 + seed).unwrap();
                let tree = model
                    .parse(&embedder, &vocab, &words, &vec![false; len], &labels)
                    .unwrap();
                tree.validate().unwrap();
                let tape = Tape::inference();
                let mut rng = rng_from_seed(0);
                let scores = model.scores(&embedder, &tape, &vocab, &words, false, &mut rng).unwrap();
                let arcs = scores.arc_logits.to_vec();
                let n = len;
                let expected = max_single_root_arborescence(n, |h, d| arcs[(d - 1) * (n + 1) + h]);
                assert_eq!(tree.heads, expected, "len {} seed {}", len, seed);
            }
        }
    }

    #[test]
    fn single_word_parses_to_root() {
        let vocab = test_vocab(&["runs"]);
        let embedder = embedder_f32(&vocab, CachePolicy::PerSentence, 15);
        let labels = LabelSet::plain(&["root", "dep"]).unwrap();
        let model = FrozenParser::<f32>::with_dims(16, 5, 1, 4, labels.len(), 16).unwrap();
        let tree = model
            .parse(&embedder, &vocab, &strs(&["runs"]), &[false], &labels)
            .unwrap();
        assert_eq!(tree.heads, vec![0]);
        tree.validate().unwrap();
    }

    // At the 0.02-std init, gradients into the lower LSTM layer shrink to
    // ~1e-11 and central differences bottom out on f64 rounding, so the
    // checks run at a generic parameter point with healthy magnitudes.
    fn randomize(params: &ParamSet<f64>, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for (_, t) in params.iter() {
            let fresh = Tensor::<f64>::trunc_normal(t.shape().to_vec(), 0.4, &mut rng);
            t.data_mut().copy_from_slice(&fresh.data());
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let vocab = test_vocab(&["good", "bad", "item"]);
        let embedder = embedder_f64(&vocab, 17);
        let model = FrozenClassifier::<f64>::with_dims(16, 3, 2, 4, 2, 18).unwrap();
        let all = model.trainable_params();
        randomize(&all, 23);
        let names: Vec<String> = all.iter().map(|(n, _)| n.clone()).collect();
        let refs: Vec<(&str, &Tensor<f64>)> = names
            .iter()
            .map(|n| (n.as_str(), all.get(n).unwrap()))
            .collect();
        let (worst, err) = grad_check_named(
            |tape| {
                let mut rng = rng_from_seed(0);
                model
                    .loss(&embedder, tape, &vocab, "good item bad", 1, false, &mut rng)
                    .map_err(|_| crate::tensor::TensorError::NonFinite { op: "frozen_loss" })
            },
            &refs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "worst {} err {}", worst, err);
    }

    #[test]
    fn tagger_gradients_match_finite_differences() {
        let vocab = test_vocab(&["al", "##ice", "sees", "the"]);
        let embedder = embedder_f64(&vocab, 19);
        let labels = LabelSet::bio(&["PER"]).unwrap();
        let model = FrozenTagger::<f64>::with_dims(16, 3, 1, &labels, 20).unwrap();
        randomize(&model.trainable_params(), 24);
        let words = strs(&["alice", "sees", "the"]);
        let gold = vec![
            labels.index_of("B-PER").unwrap(),
            labels.index_of("O").unwrap(),
            labels.index_of("O").unwrap(),
        ];
        let all = model.trainable_params();
        let names: Vec<String> = all.iter().map(|(n, _)| n.clone()).collect();
        let refs: Vec<(&str, &Tensor<f64>)> = names
            .iter()
            .map(|n| (n.as_str(), all.get(n).unwrap()))
            .collect();
        let (worst, err) = grad_check_named(
            |tape| {
                let mut rng = rng_from_seed(0);
                model
                    .loss(&embedder, tape, &vocab, &words, &gold, false, &mut rng)
                    .map_err(|_| crate::tensor::TensorError::NonFinite { op: "frozen_loss" })
            },
            &refs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "worst {} err {}", worst, err);
    }

    #[test]
    fn parser_gradients_match_finite_differences() {
        let vocab = test_vocab(&["the", "dog", "runs"]);
        let embedder = embedder_f64(&vocab, 21);
        let model = FrozenParser::<f64>::with_dims(16, 3, 1, 3, 2, 22).unwrap();
        randomize(&model.trainable_params(), 25);
        let words = strs(&["the", "dog", "runs"]);
        let gold_heads = vec![2usize, 3, 0];
        let gold_labels = vec![1u32, 1, 0];
        let all = model.trainable_params();
        // arc.head.b cannot move the arc softmax (uniform per-dependent
        // shift), so its true gradient is zero; finite differences on it
        // only see rounding noise.
        let names: Vec<String> = all
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n != "arc.head.b")
            .collect();
        let refs: Vec<(&str, &Tensor<f64>)> = names
            .iter()
            .map(|n| (n.as_str(), all.get(n).unwrap()))
            .collect();
        let (worst, err) = grad_check_named(
            |tape| {
                let mut rng = rng_from_seed(0);
                model
                    .loss(&embedder, tape, &vocab, &words, &gold_heads, &gold_labels, false, &mut rng)
                    .map_err(|_| crate::tensor::TensorError::NonFinite { op: "frozen_loss" })
            },
            &refs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "worst {} err {}", worst, err);
    }
}

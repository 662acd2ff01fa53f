//! Bidirectional transformer encoder with learned token/segment/position
//! embeddings, post-layer-norm residual blocks, and a tanh pooler over the
//! first position.
//!
//! Parameter count for a config (L layers, hidden H, feed-forward F,
//! vocab V, positions P):
//!
//!   embeddings   H*(V + P + 2) + 2H
//!   per layer    4H^2 + 4H  (q/k/v/o projections)
//!                + 2H       (attention layer norm)
//!                + 2HF + F + H  (feed-forward)
//!                + 2H       (feed-forward layer norm)
//!   pooler       H^2 + H
//!
//! total = H*(V + P + 4) + L*(4H^2 + 2HF + F + 9H) + H^2 + H

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ops;
use crate::tensor::{
    load_param_archive, save_param_archive, ArchiveError, ParamSet, Scalar, Tape, Tensor,
    TensorError,
};
use crate::util::{derive_seed, rng_from_seed};
use crate::vocab::Casing;

const LN_EPS: f64 = 1e-12;
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub casing: Casing,
}

impl EncoderConfig {
    pub fn base(vocab_size: usize, casing: Casing) -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ff_size: 3072,
            max_positions: 512,
            vocab_size,
            dropout: 0.1,
            casing,
        }
    }

    pub fn tiny(vocab_size: usize, casing: Casing) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 256,
            max_positions: 128,
            vocab_size,
            dropout: 0.1,
            casing,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden_size == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(EncoderError::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_positions < 1 {
            return Err(EncoderError::Config("max_positions must be >= 1".to_string()));
        }
        if self.ff_size < self.hidden_size {
            return Err(EncoderError::Config(format!(
                "ff_size {} below hidden_size {}",
                self.ff_size, self.hidden_size
            )));
        }
        if self.num_layers == 0 || self.vocab_size == 0 {
            return Err(EncoderError::Config("num_layers and vocab_size must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Closed-form parameter count; see the module docs for the derivation.
    pub fn param_count(&self) -> usize {
        let (h, f, l) = (self.hidden_size, self.ff_size, self.num_layers);
        h * (self.vocab_size + self.max_positions + 4)
            + l * (4 * h * h + 2 * h * f + f + 9 * h)
            + h * h
            + h
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let h = self.hidden_size;
        let mut m = BTreeMap::new();
        m.insert("embed.token".to_string(), vec![self.vocab_size, h]);
        m.insert("embed.segment".to_string(), vec![2, h]);
        m.insert("embed.position".to_string(), vec![self.max_positions, h]);
        m.insert("embed.norm.gain".to_string(), vec![h]);
        m.insert("embed.norm.bias".to_string(), vec![h]);
        for i in 0..self.num_layers {
            let p = format!("layer.{:02}", i);
            for name in ["wq", "wk", "wv", "wo"] {
                m.insert(format!("{}.attn.{}", p, name), vec![h, h]);
            }
            for name in ["bq", "bk", "bv", "bo"] {
                m.insert(format!("{}.attn.{}", p, name), vec![h]);
            }
            m.insert(format!("{}.attn.norm.gain", p), vec![h]);
            m.insert(format!("{}.attn.norm.bias", p), vec![h]);
            m.insert(format!("{}.ff.w1", p), vec![h, self.ff_size]);
            m.insert(format!("{}.ff.b1", p), vec![self.ff_size]);
            m.insert(format!("{}.ff.w2", p), vec![self.ff_size, h]);
            m.insert(format!("{}.ff.b2", p), vec![h]);
            m.insert(format!("{}.ff.norm.gain", p), vec![h]);
            m.insert(format!("{}.ff.norm.bias", p), vec![h]);
        }
        m.insert("pooler.w".to_string(), vec![h, h]);
        m.insert("pooler.b".to_string(), vec![h]);
        m
    }
}

/// Row-major integer matrix used for token/segment ids and attention masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl IntMatrix {
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self, EncoderError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(EncoderError::Input("empty matrix".to_string()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(EncoderError::Input("ragged rows".to_string()));
            }
            data.extend_from_slice(r);
        }
        Ok(IntMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: u32) -> Self {
        IntMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn flat(&self) -> &[u32] {
        &self.data
    }
}

pub struct EncoderModel<T: Scalar> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

pub fn init_params<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderModel<T>, EncoderError> {
    config.validate()?;
    let mut params = ParamSet::new();
    for (name, shape) in config.expected_shapes() {
        let tensor = init_tensor::<T>(&name, &shape, seed);
        params.insert(name, tensor);
    }
    Ok(EncoderModel {
        config: config.clone(),
        params,
    })
}

fn init_tensor<T: Scalar>(name: &str, shape: &[usize], seed: u64) -> Tensor<T> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "gain" {
        Tensor::full(shape.to_vec(), T::one())
    } else if leaf.starts_with('b') {
        Tensor::zeros(shape.to_vec())
    } else {
        let mut rng = rng_from_seed(derive_seed(seed, name));
        Tensor::trunc_normal(shape.to_vec(), 0.02, &mut rng)
    }
}

pub struct EncodeOutput<T: Scalar> {
    /// final hidden states, shape [batch, len, hidden]
    pub sequence: Tensor<T>,
    /// same states flattened to [batch*len, hidden], handy for row gathers
    pub flat: Tensor<T>,
    /// tanh-projected vector at position 0, shape [batch, hidden]
    pub pooled: Tensor<T>,
}

fn layer_norm_with<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<Tensor<T>, TensorError> {
    let normed = ops::layer_norm(tape, x, LN_EPS)?;
    let scaled = ops::mul_last(tape, &normed, params.get(&format!("{}.gain", prefix))?)?;
    ops::add_bias(tape, &scaled, params.get(&format!("{}.bias", prefix))?)
}

fn linear<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    params: &ParamSet<T>,
    w: &str,
    b: &str,
) -> Result<Tensor<T>, TensorError> {
    let y = ops::matmul(tape, x, params.get(w)?)?;
    ops::add_bias(tape, &y, params.get(b)?)
}

/// Runs the encoder over a batch. Attention masking is additive over keys,
/// so padding positions cannot influence any unmasked position; queries at
/// padding positions still see real keys, which keeps every softmax row
/// finite. Dropout draws from `rng` only when `train` is true.
pub fn encode<T: Scalar>(
    config: &EncoderConfig,
    params: &ParamSet<T>,
    tape: &Tape<T>,
    token_ids: &IntMatrix,
    segment_ids: &IntMatrix,
    attention_mask: &IntMatrix,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<EncodeOutput<T>, EncoderError> {
    let (b, l) = (token_ids.rows(), token_ids.cols());
    if segment_ids.rows() != b || segment_ids.cols() != l || attention_mask.rows() != b || attention_mask.cols() != l {
        return Err(EncoderError::Input(format!(
            "shape mismatch: tokens {}x{}, segments {}x{}, mask {}x{}",
            b,
            l,
            segment_ids.rows(),
            segment_ids.cols(),
            attention_mask.rows(),
            attention_mask.cols()
        )));
    }
    if l > config.max_positions {
        return Err(EncoderError::Input(format!(
            "sequence length {} exceeds max_positions {}",
            l, config.max_positions
        )));
    }
    for &id in token_ids.flat() {
        if id as usize >= config.vocab_size {
            return Err(EncoderError::Input(format!(
                "token id {} outside vocabulary of {}",
                id, config.vocab_size
            )));
        }
    }
    for &s in segment_ids.flat() {
        if s > 1 {
            return Err(EncoderError::Input(format!("segment id {} not in {{0, 1}}", s)));
        }
    }
    for r in 0..b {
        let mut any = false;
        for c in 0..l {
            match attention_mask.get(r, c) {
                0 => {}
                1 => any = true,
                v => return Err(EncoderError::Input(format!("mask value {} not in {{0, 1}}", v))),
            }
        }
        if !any {
            return Err(EncoderError::Input(format!("mask row {} is fully masked", r)));
        }
    }

    let (h, nh, dh) = (config.hidden_size, config.num_heads, config.head_size());
    let p = config.dropout;

    let tok = ops::embedding_lookup(tape, params.get("embed.token")?, token_ids.flat())?;
    let seg = ops::embedding_lookup(tape, params.get("embed.segment")?, segment_ids.flat())?;
    let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..l as u32).collect();
    let pos = ops::embedding_lookup(tape, params.get("embed.position")?, &pos_ids)?;
    let mut x = ops::add(tape, &ops::add(tape, &tok, &seg)?, &pos)?;
    x = layer_norm_with(tape, &x, params, "embed.norm")?;
    x = ops::dropout(tape, &x, p, train, rng)?;

    // one key-permission row per (batch, head) group
    let mut allowed = Vec::with_capacity(b * nh * l);
    for r in 0..b {
        for _ in 0..nh {
            for c in 0..l {
                allowed.push(attention_mask.get(r, c) == 1);
            }
        }
    }

    let split_heads = |tape: &Tape<T>, t: &Tensor<T>| -> Result<Tensor<T>, TensorError> {
        let r = ops::reshape(tape, t, &[b, l, nh, dh])?;
        let r = ops::permute(tape, &r, &[0, 2, 1, 3])?;
        ops::reshape(tape, &r, &[b * nh, l, dh])
    };

    for i in 0..config.num_layers {
        let pfx = format!("layer.{:02}", i);
        let q = linear(tape, &x, params, &format!("{}.attn.wq", pfx), &format!("{}.attn.bq", pfx))?;
        let k = linear(tape, &x, params, &format!("{}.attn.wk", pfx), &format!("{}.attn.bk", pfx))?;
        let v = linear(tape, &x, params, &format!("{}.attn.wv", pfx), &format!("{}.attn.bv", pfx))?;
        let qh = split_heads(tape, &q)?;
        let kh = split_heads(tape, &k)?;
        let vh = split_heads(tape, &v)?;
        let kt = ops::permute(tape, &kh, &[0, 2, 1])?;
        let mut scores = ops::scale(tape, &ops::bmm(tape, &qh, &kt)?, 1.0 / (dh as f64).sqrt())?;
        scores = ops::add_key_mask(tape, &scores, &allowed)?;
        let mut attn = ops::softmax(tape, &scores, 2)?;
        attn = ops::dropout(tape, &attn, p, train, rng)?;
        let ctx = ops::bmm(tape, &attn, &vh)?;
        let merged = {
            let r = ops::reshape(tape, &ctx, &[b, nh, l, dh])?;
            let r = ops::permute(tape, &r, &[0, 2, 1, 3])?;
            ops::reshape(tape, &r, &[b * l, h])?
        };
        let mut attn_out = linear(tape, &merged, params, &format!("{}.attn.wo", pfx), &format!("{}.attn.bo", pfx))?;
        attn_out = ops::dropout(tape, &attn_out, p, train, rng)?;
        x = layer_norm_with(tape, &ops::add(tape, &x, &attn_out)?, params, &format!("{}.attn.norm", pfx))?;

        let inner = ops::gelu(tape, &linear(tape, &x, params, &format!("{}.ff.w1", pfx), &format!("{}.ff.b1", pfx))?)?;
        let mut ff = linear(tape, &inner, params, &format!("{}.ff.w2", pfx), &format!("{}.ff.b2", pfx))?;
        ff = ops::dropout(tape, &ff, p, train, rng)?;
        x = layer_norm_with(tape, &ops::add(tape, &x, &ff)?, params, &format!("{}.ff.norm", pfx))?;
    }

    let sequence = ops::reshape(tape, &x, &[b, l, h])?;
    let cls_rows: Vec<usize> = (0..b).map(|r| r * l).collect();
    let cls = ops::index_rows(tape, &x, &cls_rows)?;
    let pooled = ops::tanh(tape, &linear(tape, &cls, params, "pooler.w", "pooler.b")?)?;
    Ok(EncodeOutput {
        sequence,
        flat: x,
        pooled,
    })
}

impl<T: Scalar> EncoderModel<T> {
    pub fn encode(
        &self,
        tape: &Tape<T>,
        token_ids: &IntMatrix,
        segment_ids: &IntMatrix,
        attention_mask: &IntMatrix,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncodeOutput<T>, EncoderError> {
        encode(&self.config, &self.params, tape, token_ids, segment_ids, attention_mask, train, rng)
    }

    /// Grows the position table to `new_max`. Existing rows are carried
    /// over bitwise; the added rows draw from the init distribution under
    /// a seed derived from `seed`.
    pub fn extend_positions(&mut self, new_max: usize, seed: u64) -> Result<(), EncoderError> {
        let old_max = self.config.max_positions;
        if new_max <= old_max {
            return Err(EncoderError::Config(format!(
                "new_max {} must exceed current max_positions {}",
                new_max, old_max
            )));
        }
        let h = self.config.hidden_size;
        let old = self.params.get("embed.position")?.clone();
        let mut rng = rng_from_seed(derive_seed(seed, "embed.position.extend"));
        let fresh = Tensor::<T>::trunc_normal(vec![new_max - old_max, h], 0.02, &mut rng);
        let mut data = old.to_vec();
        data.extend(fresh.to_vec());
        self.params
            .replace("embed.position", Tensor::from_vec(vec![new_max, h], data)?)?;
        self.config.max_positions = new_max;
        Ok(())
    }

    /// Grows the token embedding table, e.g. after adding marker tokens to
    /// the vocabulary. Existing rows are preserved bitwise.
    pub fn extend_vocab(&mut self, new_size: usize, seed: u64) -> Result<(), EncoderError> {
        let old_size = self.config.vocab_size;
        if new_size <= old_size {
            return Err(EncoderError::Config(format!(
                "new vocab size {} must exceed current {}",
                new_size, old_size
            )));
        }
        let h = self.config.hidden_size;
        let old = self.params.get("embed.token")?.clone();
        let mut rng = rng_from_seed(derive_seed(seed, "embed.token.extend"));
        let fresh = Tensor::<T>::trunc_normal(vec![new_size - old_size, h], 0.02, &mut rng);
        let mut data = old.to_vec();
        data.extend(fresh.to_vec());
        self.params
            .replace("embed.token", Tensor::from_vec(vec![new_size, h], data)?)?;
        self.config.vocab_size = new_size;
        Ok(())
    }

    /// Writes the parameter archive plus a `config.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        save_param_archive(&self.params, dir)?;
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(dir.join(CONFIG_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let json = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let config: EncoderConfig = serde_json::from_str(&json)?;
        config.validate()?;
        let params: ParamSet<T> = load_param_archive(dir)?;
        let expected = config.expected_shapes();
        let names = params.names();
        if names.len() != expected.len() {
            return Err(EncoderError::Config(format!(
                "checkpoint has {} parameters, config implies {}",
                names.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(EncoderError::Config(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(EncoderModel { config, params })
    }
}

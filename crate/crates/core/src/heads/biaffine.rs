//! Biaffine arc and label scoring for dependency parsing, operating on any
//! [n, hidden] matrix of token vectors so both the finetuned encoder and the
//! frozen BiLSTM stack can share it.
//!
//! Arc score for dependent i with candidate head j: [dep_i; 1]^T U_arc head_j,
//! where heads include a learned root vector at position 0. Label scores use
//! a bias-augmented bilinear form on both sides.

use rand_chacha::ChaCha8Rng;

use crate::tensor::ops;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor};
use crate::util::{derive_seed, rng_from_seed};

use super::{arborescence, HeadError};

/// Projection width used by the parser head.
pub const ARC_DIM: usize = 100;

pub struct BiaffineParams<T: Scalar> {
    pub params: ParamSet<T>,
    hidden: usize,
    num_labels: usize,
    arc_dim: usize,
}

fn proj_seeded<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::trunc_normal(shape, 0.02, rng)
}

impl<T: Scalar> BiaffineParams<T> {
    pub fn new(hidden: usize, num_labels: usize, seed: u64) -> Result<Self, HeadError> {
        Self::with_dims(hidden, num_labels, ARC_DIM, seed)
    }

    /// Same layout with a custom projection width; tests use small widths to
    /// keep finite-difference checks fast.
    pub fn with_dims(hidden: usize, num_labels: usize, arc_dim: usize, seed: u64) -> Result<Self, HeadError> {
        if hidden == 0 || num_labels == 0 || arc_dim == 0 {
            return Err(HeadError::Input("biaffine dimensions must be positive".to_string()));
        }
        let a = arc_dim;
        let mut params = ParamSet::new();
        for name in ["arc.head", "arc.dep", "lab.head", "lab.dep"] {
            let mut rng = rng_from_seed(derive_seed(seed, name));
            params.insert(format!("{}.w", name), proj_seeded(vec![hidden, a], &mut rng));
            params.insert(format!("{}.b", name), Tensor::zeros(vec![a]));
        }
        let mut rng = rng_from_seed(derive_seed(seed, "u.arc"));
        params.insert("u.arc", proj_seeded(vec![a + 1, a], &mut rng));
        let mut rng = rng_from_seed(derive_seed(seed, "u.lab"));
        params.insert("u.lab", proj_seeded(vec![a + 1, num_labels, a + 1], &mut rng));
        let mut rng = rng_from_seed(derive_seed(seed, "root"));
        params.insert("root", proj_seeded(vec![1, hidden], &mut rng));
        Ok(BiaffineParams {
            params,
            hidden,
            num_labels,
            arc_dim: a,
        })
    }

    /// Rebinds a parameter set loaded from an archive, inferring and
    /// validating the dimensions.
    pub fn from_params(params: ParamSet<T>, num_labels: usize) -> Result<Self, HeadError> {
        let w = params.get("arc.head.w").map_err(|e| HeadError::Input(e.to_string()))?;
        if w.ndim() != 2 {
            return Err(HeadError::Input("arc.head.w must be a matrix".to_string()));
        }
        let hidden = w.shape()[0];
        let arc_dim = w.shape()[1];
        let expect: Vec<(&str, Vec<usize>)> = vec![
            ("arc.head.w", vec![hidden, arc_dim]),
            ("arc.head.b", vec![arc_dim]),
            ("arc.dep.w", vec![hidden, arc_dim]),
            ("arc.dep.b", vec![arc_dim]),
            ("lab.head.w", vec![hidden, arc_dim]),
            ("lab.head.b", vec![arc_dim]),
            ("lab.dep.w", vec![hidden, arc_dim]),
            ("lab.dep.b", vec![arc_dim]),
            ("u.arc", vec![arc_dim + 1, arc_dim]),
            ("u.lab", vec![arc_dim + 1, num_labels, arc_dim + 1]),
            ("root", vec![1, hidden]),
        ];
        for (name, shape) in &expect {
            let t = params.get(name).map_err(|e| HeadError::Input(e.to_string()))?;
            if t.shape() != shape.as_slice() {
                return Err(HeadError::Input(format!(
                    "{} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        if params.len() != expect.len() {
            return Err(HeadError::Input(format!(
                "expected {} parser parameters, found {}",
                expect.len(),
                params.len()
            )));
        }
        Ok(BiaffineParams {
            params,
            hidden,
            num_labels,
            arc_dim,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn arc_dim(&self) -> usize {
        self.arc_dim
    }
}

pub struct BiaffineScores<T: Scalar> {
    /// [n, n+1]: row = dependent token, column 0 = root, column j = token j.
    pub arc_logits: Tensor<T>,
    /// bias-augmented label features for every candidate head (root first)
    pub lab_head: Tensor<T>,
    /// bias-augmented label features per dependent
    pub lab_dep: Tensor<T>,
}

fn project<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    params: &ParamSet<T>,
    name: &str,
) -> Result<Tensor<T>, HeadError> {
    let w = params.get(&format!("{}.w", name)).map_err(|e| HeadError::Input(e.to_string()))?;
    let b = params.get(&format!("{}.b", name)).map_err(|e| HeadError::Input(e.to_string()))?;
    Ok(ops::add_bias(tape, &ops::matmul(tape, x, w)?, b)?)
}

/// Scores every (dependent, candidate head) arc and prepares the label
/// features. `words` is [n, hidden] with n >= 1.
pub fn biaffine_scores<T: Scalar>(
    tape: &Tape<T>,
    bi: &BiaffineParams<T>,
    words: &Tensor<T>,
) -> Result<BiaffineScores<T>, HeadError> {
    if words.ndim() != 2 || words.shape()[1] != bi.hidden {
        return Err(HeadError::Input(format!(
            "token matrix {:?} does not match hidden size {}",
            words.shape(),
            bi.hidden
        )));
    }
    if words.shape()[0] == 0 {
        return Err(HeadError::Input("empty sentence".to_string()));
    }
    let root = bi.params.get("root").map_err(|e| HeadError::Input(e.to_string()))?;
    let all = ops::concat(tape, &[root.clone(), words.clone()], 0)?;
    let arc_head = project(tape, &all, &bi.params, "arc.head")?;
    let arc_dep = ops::append_ones(tape, &project(tape, words, &bi.params, "arc.dep")?)?;
    let u_arc = bi.params.get("u.arc").map_err(|e| HeadError::Input(e.to_string()))?;
    let arc_logits = ops::matmul(
        tape,
        &ops::matmul(tape, &arc_dep, u_arc)?,
        &ops::permute(tape, &arc_head, &[1, 0])?,
    )?;
    let lab_head = ops::append_ones(tape, &project(tape, &all, &bi.params, "lab.head")?)?;
    let lab_dep = ops::append_ones(tape, &project(tape, words, &bi.params, "lab.dep")?)?;
    Ok(BiaffineScores {
        arc_logits,
        lab_head,
        lab_dep,
    })
}

/// Label logits [n, num_labels] for one chosen head per dependent
/// (0 selects the root).
pub fn biaffine_label_logits<T: Scalar>(
    tape: &Tape<T>,
    bi: &BiaffineParams<T>,
    scores: &BiaffineScores<T>,
    heads: &[usize],
) -> Result<Tensor<T>, HeadError> {
    let n = scores.lab_dep.shape()[0];
    let a1 = bi.arc_dim + 1;
    let l = bi.num_labels;
    if heads.len() != n {
        return Err(HeadError::Input(format!("{} heads for {} tokens", heads.len(), n)));
    }
    for (i, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(HeadError::Input(format!("head {} out of range {}", h, n)));
        }
        if h == i + 1 {
            return Err(HeadError::Input(format!("token {} attached to itself", i + 1)));
        }
    }
    let u_lab = bi.params.get("u.lab").map_err(|e| HeadError::Input(e.to_string()))?;
    let head_sel = ops::index_rows(tape, &scores.lab_head, heads)?;
    let u2 = ops::reshape(tape, u_lab, &[a1 * l, a1])?;
    let mixed = ops::permute(
        tape,
        &ops::matmul(tape, &u2, &ops::permute(tape, &head_sel, &[1, 0])?)?,
        &[1, 0],
    )?;
    let mixed3 = ops::reshape(tape, &mixed, &[n, a1, l])?;
    let dep3 = ops::reshape(tape, &scores.lab_dep, &[n, 1, a1])?;
    let logits = ops::bmm(tape, &dep3, &mixed3)?;
    Ok(ops::reshape(tape, &logits, &[n, l])?)
}

/// Training loss: cross-entropy of the gold head per token plus
/// cross-entropy of the gold label at the gold arc.
pub fn biaffine_loss<T: Scalar>(
    tape: &Tape<T>,
    bi: &BiaffineParams<T>,
    words: &Tensor<T>,
    gold_heads: &[usize],
    gold_labels: &[u32],
) -> Result<Tensor<T>, HeadError> {
    let n = words.shape()[0];
    if gold_heads.len() != n || gold_labels.len() != n {
        return Err(HeadError::Input("gold annotations do not match token count".to_string()));
    }
    let scores = biaffine_scores(tape, bi, words)?;
    let head_targets: Vec<u32> = gold_heads.iter().map(|&h| h as u32).collect();
    let arc_loss = ops::cross_entropy(tape, &scores.arc_logits, &head_targets, None)?;
    let label_logits = biaffine_label_logits(tape, bi, &scores, gold_heads)?;
    let label_loss = ops::cross_entropy(tape, &label_logits, gold_labels, None)?;
    Ok(ops::add(tape, &arc_loss, &label_loss)?)
}

/// Decodes the best single-root tree from the arc scores, then assigns each
/// selected arc its best label. Returns (heads, label indices).
pub fn decode_biaffine<T: Scalar>(
    tape: &Tape<T>,
    bi: &BiaffineParams<T>,
    scores: &BiaffineScores<T>,
) -> Result<(Vec<usize>, Vec<usize>), HeadError> {
    let n = scores.lab_dep.shape()[0];
    let arcs = scores.arc_logits.to_vec();
    let sc = |h: usize, d: usize| arcs[(d - 1) * (n + 1) + h].to_f64();
    let heads = arborescence::max_single_root_arborescence(n, sc);
    let logits = biaffine_label_logits(tape, bi, scores, &heads)?;
    let data = logits.to_vec();
    let l = bi.num_labels;
    let labels = (0..n)
        .map(|i| {
            let row = &data[i * l..(i + 1) * l];
            let mut best = 0usize;
            for (j, item) in row.iter().enumerate().skip(1) {
                if *item > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok((heads, labels))
}

//! Linear-chain CRF over label emissions, with optional BIO transition
//! constraints. The log-partition is a hand-recorded tape op whose backward
//! pass computes forward-backward marginals; the gold-path score is composed
//! from stock ops, so the NLL loss is fully differentiable in both the
//! emissions and the transition matrix.

use crate::datasets::{BioKind, LabelScheme, LabelSet};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tape, Tensor};

use super::HeadError;

const NEG: f64 = f64::NEG_INFINITY;

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let mx = vals.iter().cloned().fold(NEG, f64::max);
    if mx == NEG {
        return NEG;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Learned transition scores over `num_labels + 2` states (the last two are
/// the virtual start and end), plus a fixed mask of allowed transitions.
pub struct CrfParams<T: Scalar> {
    num_labels: usize,
    pub transitions: Tensor<T>,
    allowed: Vec<bool>,
}

fn base_mask(num_labels: usize) -> Vec<bool> {
    let s = num_labels + 2;
    let (start, end) = (num_labels, num_labels + 1);
    let mut allowed = vec![false; s * s];
    for f in 0..s {
        for t in 0..s {
            if f == end || t == start || (f == start && t == end) {
                continue;
            }
            allowed[f * s + t] = true;
        }
    }
    allowed
}

impl<T: Scalar> CrfParams<T> {
    pub fn unconstrained(num_labels: usize) -> Result<Self, HeadError> {
        if num_labels == 0 {
            return Err(HeadError::Input("need at least one label".to_string()));
        }
        let s = num_labels + 2;
        Ok(CrfParams {
            num_labels,
            transitions: Tensor::zeros(vec![s, s]).with_grad(),
            allowed: base_mask(num_labels),
        })
    }

    /// Forbids transitions that would break BIO well-formedness: I-X can
    /// only follow B-X or I-X, so start -> I-X and O -> I-X are out.
    pub fn bio(labels: &LabelSet) -> Result<Self, HeadError> {
        if labels.scheme() != LabelScheme::Bio {
            return Err(HeadError::Input("BIO constraints need a bio label set".to_string()));
        }
        let l = labels.len();
        let s = l + 2;
        let mut allowed = base_mask(l);
        for t in 0..l {
            let x = match labels.bio_kind(t) {
                BioKind::Inside(x) => x,
                _ => continue,
            };
            for f in 0..s {
                let ok = f < l
                    && matches!(labels.bio_kind(f),
                        BioKind::Begin(y) | BioKind::Inside(y) if y == x);
                if !ok {
                    allowed[f * s + t] = false;
                }
            }
        }
        Ok(CrfParams {
            num_labels: l,
            transitions: Tensor::zeros(vec![s, s]).with_grad(),
            allowed,
        })
    }

    /// Swaps in transitions loaded from an archive, keeping the mask.
    pub fn bind_transitions(&mut self, transitions: Tensor<T>) -> Result<(), HeadError> {
        let s = self.num_states();
        if transitions.shape() != [s, s] {
            return Err(HeadError::Input(format!(
                "transition matrix {:?} does not match {} states",
                transitions.shape(),
                s
            )));
        }
        self.transitions = transitions;
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_states(&self) -> usize {
        self.num_labels + 2
    }

    pub fn start_state(&self) -> usize {
        self.num_labels
    }

    pub fn end_state(&self) -> usize {
        self.num_labels + 1
    }

    pub fn is_allowed(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.num_states() + to]
    }

    /// Transition scores as a flat [states, states] row-major matrix with
    /// forbidden entries pinned to -inf.
    pub fn masked(&self) -> Vec<f64> {
        let s = self.num_states();
        let data = self.transitions.data();
        (0..s * s)
            .map(|i| if self.allowed[i] { data[i].to_f64() } else { NEG })
            .collect()
    }
}

fn check_emissions<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>) -> Result<(usize, usize), HeadError> {
    if emissions.ndim() != 2 || emissions.shape()[1] != crf.num_labels() {
        return Err(HeadError::Input(format!(
            "emissions {:?} do not match {} labels",
            emissions.shape(),
            crf.num_labels()
        )));
    }
    let len = emissions.shape()[0];
    if len == 0 {
        return Err(HeadError::Input("empty sequence".to_string()));
    }
    Ok((len, crf.num_labels()))
}

fn forward_alphas(em: &[f64], tr: &[f64], len: usize, l: usize) -> Vec<f64> {
    let s = l + 2;
    let start = l;
    let mut alpha = vec![NEG; len * l];
    for y in 0..l {
        alpha[y] = tr[start * s + y] + em[y];
    }
    for t in 1..len {
        for y in 0..l {
            alpha[t * l + y] = em[t * l + y]
                + log_sum_exp((0..l).map(|p| alpha[(t - 1) * l + p] + tr[p * s + y]));
        }
    }
    alpha
}

/// Log of the summed exponentiated scores of every allowed label path,
/// computed by the forward algorithm in log space. Differentiable in both
/// the emissions and the transitions; the backward pass distributes the
/// upstream gradient according to forward-backward marginals.
pub fn crf_log_partition<T: Scalar>(
    tape: &Tape<T>,
    emissions: &Tensor<T>,
    crf: &CrfParams<T>,
) -> Result<Tensor<T>, HeadError> {
    let (len, l) = check_emissions(emissions, crf)?;
    let s = l + 2;
    let end = l + 1;
    let em: Vec<f64> = emissions.data().iter().map(|v| v.to_f64()).collect();
    let tr = crf.masked();
    let alpha = forward_alphas(&em, &tr, len, l);
    let logz = log_sum_exp((0..l).map(|y| alpha[(len - 1) * l + y] + tr[y * s + end]));
    if !logz.is_finite() {
        return Err(HeadError::Crf("every label path is forbidden".to_string()));
    }
    let out = Tensor::scalar(T::from_f64(logz));
    if tape.wants(&[emissions, &crf.transitions]) {
        let emissions = emissions.clone();
        let transitions = crf.transitions.clone();
        let allowed = crf.allowed.clone();
        tape.record(&out, move |g| {
            let g0 = g[0].to_f64();
            let em: Vec<f64> = emissions.data().iter().map(|v| v.to_f64()).collect();
            let tr: Vec<f64> = (0..s * s)
                .map(|i| if allowed[i] { transitions.data()[i].to_f64() } else { NEG })
                .collect();
            let start = l;
            let alpha = forward_alphas(&em, &tr, len, l);
            let mut beta = vec![NEG; len * l];
            for y in 0..l {
                beta[(len - 1) * l + y] = tr[y * s + end];
            }
            for t in (0..len - 1).rev() {
                for y in 0..l {
                    beta[t * l + y] = log_sum_exp(
                        (0..l).map(|n| tr[y * s + n] + em[(t + 1) * l + n] + beta[(t + 1) * l + n]),
                    );
                }
            }
            let logz = log_sum_exp((0..l).map(|y| alpha[(len - 1) * l + y] + tr[y * s + end]));
            let marginal = |t: usize, y: usize| (alpha[t * l + y] + beta[t * l + y] - logz).exp();
            if emissions.requires_grad() {
                let mut de = vec![T::zero(); len * l];
                for t in 0..len {
                    for y in 0..l {
                        de[t * l + y] = T::from_f64(g0 * marginal(t, y));
                    }
                }
                emissions.accumulate_grad(&de);
            }
            if transitions.requires_grad() {
                let mut dt = vec![0.0f64; s * s];
                for y in 0..l {
                    dt[start * s + y] += marginal(0, y);
                    dt[y * s + end] += marginal(len - 1, y);
                }
                for t in 0..len - 1 {
                    for f in 0..l {
                        for n in 0..l {
                            if allowed[f * s + n] {
                                dt[f * s + n] += (alpha[t * l + f]
                                    + tr[f * s + n]
                                    + em[(t + 1) * l + n]
                                    + beta[(t + 1) * l + n]
                                    - logz)
                                    .exp();
                            }
                        }
                    }
                }
                let dt: Vec<T> = dt.iter().map(|&v| T::from_f64(g0 * v)).collect();
                transitions.accumulate_grad(&dt);
            }
        });
    }
    Ok(out)
}

/// Score of one specific path: its emissions plus its transitions including
/// the virtual start and end. Built from stock ops so gradients flow.
pub fn crf_gold_score<T: Scalar>(
    tape: &Tape<T>,
    emissions: &Tensor<T>,
    crf: &CrfParams<T>,
    path: &[usize],
) -> Result<Tensor<T>, HeadError> {
    let (len, l) = check_emissions(emissions, crf)?;
    let s = l + 2;
    if path.len() != len {
        return Err(HeadError::Input(format!(
            "path length {} does not match sequence length {}",
            path.len(),
            len
        )));
    }
    for &y in path {
        if y >= l {
            return Err(HeadError::Input(format!("label index {} out of range {}", y, l)));
        }
    }
    let mut states = vec![crf.start_state()];
    states.extend_from_slice(path);
    states.push(crf.end_state());
    for pair in states.windows(2) {
        if !crf.is_allowed(pair[0], pair[1]) {
            return Err(HeadError::Crf(format!(
                "gold path uses forbidden transition {} -> {}",
                pair[0], pair[1]
            )));
        }
    }
    let flat_em = ops::reshape(tape, emissions, &[len * l, 1])?;
    let em_rows: Vec<usize> = path.iter().enumerate().map(|(t, &y)| t * l + y).collect();
    let em_part = ops::sum(tape, &ops::index_rows(tape, &flat_em, &em_rows)?)?;
    let flat_tr = ops::reshape(tape, &crf.transitions, &[s * s, 1])?;
    let tr_rows: Vec<usize> = states.windows(2).map(|p| p[0] * s + p[1]).collect();
    let tr_part = ops::sum(tape, &ops::index_rows(tape, &flat_tr, &tr_rows)?)?;
    Ok(ops::add(tape, &em_part, &tr_part)?)
}

/// Training loss: log partition minus the gold path score. Non-negative by
/// log-sum-exp dominance.
pub fn crf_nll<T: Scalar>(
    tape: &Tape<T>,
    emissions: &Tensor<T>,
    crf: &CrfParams<T>,
    path: &[usize],
) -> Result<Tensor<T>, HeadError> {
    let logz = crf_log_partition(tape, emissions, crf)?;
    let gold = crf_gold_score(tape, emissions, crf, path)?;
    Ok(ops::sub(tape, &logz, &gold)?)
}

/// Viterbi argmax over allowed paths. Ties resolve to the lowest label
/// index at the latest position where the tied paths differ.
pub fn crf_decode<T: Scalar>(emissions: &Tensor<T>, crf: &CrfParams<T>) -> Result<Vec<usize>, HeadError> {
    let (len, l) = check_emissions(emissions, crf)?;
    let s = l + 2;
    let (start, end) = (crf.start_state(), crf.end_state());
    let em: Vec<f64> = emissions.data().iter().map(|v| v.to_f64()).collect();
    let tr = crf.masked();
    let mut score = vec![NEG; len * l];
    let mut back = vec![0usize; len * l];
    for y in 0..l {
        score[y] = tr[start * s + y] + em[y];
    }
    for t in 1..len {
        for y in 0..l {
            let mut best = NEG;
            let mut bp = 0usize;
            for p in 0..l {
                let v = score[(t - 1) * l + p] + tr[p * s + y];
                if v > best {
                    best = v;
                    bp = p;
                }
            }
            score[t * l + y] = best + em[t * l + y];
            back[t * l + y] = bp;
        }
    }
    let mut best = NEG;
    let mut last = usize::MAX;
    for y in 0..l {
        let v = score[(len - 1) * l + y] + tr[y * s + end];
        if v > best {
            best = v;
            last = y;
        }
    }
    if last == usize::MAX {
        return Err(HeadError::Crf("every label path is forbidden".to_string()));
    }
    let mut path = vec![0usize; len];
    path[len - 1] = last;
    for t in (1..len).rev() {
        path[t - 1] = back[t * l + path[t]];
    }
    Ok(path)
}

//! Forward ops with recorded backward closures.
//!
//! Conventions: no implicit broadcasting (bias/gain along the trailing
//! dimension are explicit ops), every output is checked for NaN/Inf except
//! `add_key_mask` which deliberately writes -inf, and reductions accumulate
//! in f64 for stability before casting back.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ensure_finite, shape_err, Scalar, Tape, Tensor, TensorError};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Decomposes `shape` around `axis` into (outer, axis_len, inner); element
/// (o, j, i) lives at `(o * axis_len + j) * inner + i`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("add", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    ensure_finite("add", &data)?;
    let out = Tensor::raw(a.shape().to_vec(), data);
    if tape.wants(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        tape.record(&out, move |g| {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.accumulate_grad(g);
            }
        });
    }
    Ok(out)
}

pub fn sub<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("sub", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    ensure_finite("sub", &data)?;
    let out = Tensor::raw(a.shape().to_vec(), data);
    if tape.wants(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        tape.record(&out, move |g| {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                b.accumulate_grad(&neg);
            }
        });
    }
    Ok(out)
}

pub fn mul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("mul", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    ensure_finite("mul", &data)?;
    let out = Tensor::raw(a.shape().to_vec(), data);
    if tape.wants(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        tape.record(&out, move |g| {
            if a.requires_grad() {
                let da: Vec<T> = g.iter().zip(b.data().iter()).map(|(&gi, &bi)| gi * bi).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<T> = g.iter().zip(a.data().iter()).map(|(&gi, &ai)| gi * ai).collect();
                b.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

pub fn scale<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, factor: f64) -> Result<Tensor<T>, TensorError> {
    let c = T::from_f64(factor);
    let data: Vec<T> = x.data().iter().map(|&v| v * c).collect();
    ensure_finite("scale", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let dx: Vec<T> = g.iter().map(|&v| v * c).collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn add_scalar<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, value: f64) -> Result<Tensor<T>, TensorError> {
    let c = T::from_f64(value);
    let data: Vec<T> = x.data().iter().map(|&v| v + c).collect();
    ensure_finite("add_scalar", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| x.accumulate_grad(g));
    }
    Ok(out)
}

/// Adds a length-H vector to every trailing row of `x` (shape [..., H]).
pub fn add_bias<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let h = *x.shape().last().ok_or_else(|| shape_err("add_bias", "input has rank 0"))?;
    if bias.shape() != [h] {
        return Err(shape_err(
            "add_bias",
            format!("bias {:?} does not match trailing dim {}", bias.shape(), h),
        ));
    }
    let bd = bias.data();
    let data: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % h])
        .collect();
    drop(bd);
    ensure_finite("add_bias", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x, bias]) {
        let (x, bias) = (x.clone(), bias.clone());
        tape.record(&out, move |g| {
            if x.requires_grad() {
                x.accumulate_grad(g);
            }
            if bias.requires_grad() {
                let mut db = vec![T::zero(); h];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % h] += gi;
                }
                bias.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

/// Multiplies every trailing row of `x` (shape [..., H]) by a length-H gain.
pub fn mul_last<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let h = *x.shape().last().ok_or_else(|| shape_err("mul_last", "input has rank 0"))?;
    if gain.shape() != [h] {
        return Err(shape_err(
            "mul_last",
            format!("gain {:?} does not match trailing dim {}", gain.shape(), h),
        ));
    }
    let gd = gain.data();
    let data: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * gd[i % h])
        .collect();
    drop(gd);
    ensure_finite("mul_last", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x, gain]) {
        let (x, gain) = (x.clone(), gain.clone());
        tape.record(&out, move |g| {
            if x.requires_grad() {
                let gd = gain.data();
                let dx: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * gd[i % h]).collect();
                drop(gd);
                x.accumulate_grad(&dx);
            }
            if gain.requires_grad() {
                let xd = x.data();
                let mut dg = vec![T::zero(); h];
                for (i, &gi) in g.iter().enumerate() {
                    dg[i % h] += gi * xd[i];
                }
                drop(xd);
                gain.accumulate_grad(&dg);
            }
        });
    }
    Ok(out)
}

/// Appends a constant 1 column to a [N, H] matrix, giving [N, H + 1].
pub fn append_ones<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.ndim() != 2 {
        return Err(shape_err("append_ones", format!("expected rank 2, got {:?}", x.shape())));
    }
    let (n, h) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut data = Vec::with_capacity(n * (h + 1));
    for r in 0..n {
        data.extend_from_slice(&xd[r * h..(r + 1) * h]);
        data.push(T::one());
    }
    drop(xd);
    ensure_finite("append_ones", &data)?;
    let out = Tensor::raw(vec![n, h + 1], data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let mut dx = vec![T::zero(); n * h];
            for r in 0..n {
                dx[r * h..(r + 1) * h].copy_from_slice(&g[r * (h + 1)..r * (h + 1) + h]);
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m, k] += a[m, n] * b[k, n]^T
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, orow_p) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            *orow_p += acc;
        }
    }
}

// out[k, n] += a[m, k]^T * g[m, n]
fn mm_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

pub fn matmul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = vec![T::zero(); m * n];
    mm_nn(&a.data(), &b.data(), m, k, n, &mut data);
    ensure_finite("matmul", &data)?;
    let out = Tensor::raw(vec![m, n], data);
    if tape.wants(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        tape.record(&out, move |g| {
            if a.requires_grad() {
                let mut da = vec![T::zero(); m * k];
                mm_nt(g, &b.data(), m, n, k, &mut da);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![T::zero(); k * n];
                mm_tn(&a.data(), g, m, k, n, &mut db);
                b.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

/// Batched matmul over matching leading dimension: [B,m,k] x [B,k,n].
pub fn bmm<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
        return Err(shape_err("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut data = vec![T::zero(); bs * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..bs {
            mm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
    }
    ensure_finite("bmm", &data)?;
    let out = Tensor::raw(vec![bs, m, n], data);
    if tape.wants(&[a, b]) {
        let (a, b) = (a.clone(), b.clone());
        tape.record(&out, move |g| {
            if a.requires_grad() {
                let bd = b.data();
                let mut da = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    mm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let mut db = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    mm_tn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                drop(ad);
                b.accumulate_grad(&db);
            }
        });
    }
    Ok(out)
}

/// Reorders dimensions; `axes[d]` names the input dimension that becomes
/// output dimension `d`.
pub fn permute<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>, TensorError> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err(
            "permute",
            format!("axes {:?} is not a permutation of 0..{}", axes, nd),
        ));
    }
    let in_shape = x.shape().to_vec();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_str = strides(&in_shape);
    let out_str = strides(&out_shape);
    let n = x.numel();
    // source index for each output position, reused by the backward scatter
    let mut map = vec![0usize; n];
    for (o, slot) in map.iter_mut().enumerate() {
        let mut rem = o;
        let mut ii = 0;
        for d in 0..nd {
            let c = rem / out_str[d];
            rem %= out_str[d];
            ii += c * in_str[axes[d]];
        }
        *slot = ii;
    }
    let xd = x.data();
    let data: Vec<T> = map.iter().map(|&ii| xd[ii]).collect();
    drop(xd);
    let out = Tensor::raw(out_shape, data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let mut dx = vec![T::zero(); n];
            for (o, &ii) in map.iter().enumerate() {
                dx[ii] += g[o];
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn reshape<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, new_shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() {
        return Err(shape_err(
            "reshape",
            format!("{:?} -> {:?} changes element count", x.shape(), new_shape),
        ));
    }
    let out = Tensor::raw(new_shape.to_vec(), x.to_vec());
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| x.accumulate_grad(g));
    }
    Ok(out)
}

pub fn concat<T: Scalar>(tape: &Tape<T>, parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(shape_err("concat", format!("axis {} out of rank {}", axis, nd)));
    }
    let mut axis_total = 0;
    for p in parts {
        if p.ndim() != nd {
            return Err(shape_err("concat", "rank mismatch among inputs"));
        }
        for d in 0..nd {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} outside axis {}", p.shape(), first.shape(), axis),
                ));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = lane_dims(&out_shape, axis);
    let mut data = vec![T::zero(); out_shape.iter().product()];
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let len = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let src = &pd[o * len * inner..(o + 1) * len * inner];
            let dst_base = (o * axis_total + offset) * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(src);
        }
        spans.push((offset, len));
        offset += len;
    }
    let out = Tensor::raw(out_shape, data);
    let wants = tape.wants(&parts.iter().collect::<Vec<_>>());
    if wants {
        let parts: Vec<Tensor<T>> = parts.to_vec();
        tape.record(&out, move |g| {
            for (p, &(off, len)) in parts.iter().zip(&spans) {
                if !p.requires_grad() {
                    continue;
                }
                let mut dp = vec![T::zero(); p.numel()];
                for o in 0..outer {
                    let src_base = (o * axis_total + off) * inner;
                    dp[o * len * inner..(o + 1) * len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                p.accumulate_grad(&dp);
            }
        });
    }
    Ok(out)
}

/// Contiguous slice of length `len` starting at `start` along `axis`.
pub fn narrow<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>, TensorError> {
    let nd = x.ndim();
    if axis >= nd {
        return Err(shape_err("narrow", format!("axis {} out of rank {}", axis, nd)));
    }
    let (outer, axis_len, inner) = lane_dims(x.shape(), axis);
    if start + len > axis_len {
        return Err(shape_err(
            "narrow",
            format!("range {}..{} exceeds axis length {}", start, start + len, axis_len),
        ));
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let xd = x.data();
    let mut data = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src_base = (o * axis_len + start) * inner;
        data[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&xd[src_base..src_base + len * inner]);
    }
    drop(xd);
    let out = Tensor::raw(out_shape, data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let mut dx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                let dst_base = (o * axis_len + start) * inner;
                dx[dst_base..dst_base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Gathers rows of a [N, ...] tensor; duplicate row indices are allowed and
/// their gradients accumulate.
pub fn index_rows<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>, TensorError> {
    if x.ndim() == 0 {
        return Err(shape_err("index_rows", "input has rank 0"));
    }
    let n = x.shape()[0];
    let row_size: usize = x.shape()[1..].iter().product();
    for &r in rows {
        if r >= n {
            return Err(TensorError::Index {
                op: "index_rows",
                index: r,
                bound: n,
            });
        }
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[0] = rows.len();
    let xd = x.data();
    let mut data = Vec::with_capacity(rows.len() * row_size);
    for &r in rows {
        data.extend_from_slice(&xd[r * row_size..(r + 1) * row_size]);
    }
    drop(xd);
    let out = Tensor::raw(out_shape, data);
    if tape.wants(&[x]) {
        let x = x.clone();
        let rows = rows.to_vec();
        tape.record(&out, move |g| {
            let mut dx = vec![T::zero(); x.numel()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..row_size {
                    dx[r * row_size + j] += g[i * row_size + j];
                }
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Looks up embedding rows by token id, validating ids against the table.
pub fn embedding_lookup<T: Scalar>(tape: &Tape<T>, table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, TensorError> {
    if table.ndim() != 2 {
        return Err(shape_err(
            "embedding_lookup",
            format!("table must be rank 2, got {:?}", table.shape()),
        ));
    }
    let vocab = table.shape()[0];
    let rows: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
    for &r in &rows {
        if r >= vocab {
            return Err(TensorError::Index {
                op: "embedding_lookup",
                index: r,
                bound: vocab,
            });
        }
    }
    index_rows(tape, table, &rows)
}

pub fn softmax<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.ndim() {
        return Err(shape_err("softmax", format!("axis {} out of rank {}", axis, x.ndim())));
    }
    let (outer, len, inner) = lane_dims(x.shape(), axis);
    let xd = x.data();
    let mut data = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.maximum(xd[at(j)]);
            }
            let mut denom = 0.0f64;
            for j in 0..len {
                let e = (xd[at(j)] - m).exp();
                data[at(j)] = e;
                denom += e.to_f64();
            }
            for j in 0..len {
                data[at(j)] = T::from_f64(data[at(j)].to_f64() / denom);
            }
        }
    }
    drop(xd);
    ensure_finite("softmax", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let (x, y) = (x.clone(), out.clone());
        tape.record(&out, move |g| {
            let yd = y.data();
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut dot = 0.0f64;
                    for j in 0..len {
                        dot += (g[at(j)] * yd[at(j)]).to_f64();
                    }
                    let dot = T::from_f64(dot);
                    for j in 0..len {
                        dx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            drop(yd);
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn log_softmax<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.ndim() {
        return Err(shape_err(
            "log_softmax",
            format!("axis {} out of rank {}", axis, x.ndim()),
        ));
    }
    let (outer, len, inner) = lane_dims(x.shape(), axis);
    let xd = x.data();
    let mut data = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.maximum(xd[at(j)]);
            }
            let mut denom = 0.0f64;
            for j in 0..len {
                denom += (xd[at(j)] - m).exp().to_f64();
            }
            let lse = m + T::from_f64(denom.ln());
            for j in 0..len {
                data[at(j)] = xd[at(j)] - lse;
            }
        }
    }
    drop(xd);
    ensure_finite("log_softmax", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let (x, y) = (x.clone(), out.clone());
        tape.record(&out, move |g| {
            let yd = y.data();
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut gsum = 0.0f64;
                    for j in 0..len {
                        gsum += g[at(j)].to_f64();
                    }
                    let gsum = T::from_f64(gsum);
                    for j in 0..len {
                        dx[at(j)] = g[at(j)] - yd[at(j)].exp() * gsum;
                    }
                }
            }
            drop(yd);
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Normalizes each trailing row to zero mean and unit variance (biased
/// variance, stabilized by `eps`). Gain and bias are separate ops.
pub fn layer_norm<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>, TensorError> {
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            detail: format!("eps must be positive, got {}", eps),
        });
    }
    let h = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "input has rank 0"))?;
    if h == 0 {
        return Err(shape_err("layer_norm", "trailing dimension is 0"));
    }
    let rows = x.numel() / h;
    let xd = x.data();
    let mut data = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let lane = &xd[r * h..(r + 1) * h];
        let mean = lane.iter().map(|v| v.to_f64()).sum::<f64>() / h as f64;
        let var = lane.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / h as f64;
        let r_inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = T::from_f64(r_inv);
        for j in 0..h {
            data[r * h + j] = T::from_f64((lane[j].to_f64() - mean) * r_inv);
        }
    }
    drop(xd);
    ensure_finite("layer_norm", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let (x, y) = (x.clone(), out.clone());
        tape.record(&out, move |g| {
            let yd = y.data();
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gl = &g[r * h..(r + 1) * h];
                let yl = &yd[r * h..(r + 1) * h];
                let mean_g = gl.iter().map(|v| v.to_f64()).sum::<f64>() / h as f64;
                let mean_gy = gl
                    .iter()
                    .zip(yl)
                    .map(|(a, b)| a.to_f64() * b.to_f64())
                    .sum::<f64>()
                    / h as f64;
                for j in 0..h {
                    let v = gl[j].to_f64() - mean_g - yl[j].to_f64() * mean_gy;
                    dx[r * h + j] = inv_std[r] * T::from_f64(v);
                }
            }
            drop(yd);
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Gaussian error linear unit, tanh approximation.
pub fn gelu<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|v| {
            let xf = v.to_f64();
            let u = GELU_C * (xf + GELU_A * xf * xf * xf);
            T::from_f64(0.5 * xf * (1.0 + u.tanh()))
        })
        .collect();
    ensure_finite("gelu", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let xd = x.data();
            let dx: Vec<T> = g
                .iter()
                .zip(xd.iter())
                .map(|(gi, v)| {
                    let xf = v.to_f64();
                    let u = GELU_C * (xf + GELU_A * xf * xf * xf);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
                    let d = 0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du;
                    T::from_f64(gi.to_f64() * d)
                })
                .collect();
            drop(xd);
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn tanh<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let data: Vec<T> = x.data().iter().map(|v| v.tanh()).collect();
    ensure_finite("tanh", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let (x, y) = (x.clone(), out.clone());
        tape.record(&out, move |g| {
            let yd = y.data();
            let dx: Vec<T> = g
                .iter()
                .zip(yd.iter())
                .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                .collect();
            drop(yd);
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
        .collect();
    ensure_finite("sigmoid", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let (x, y) = (x.clone(), out.clone());
        tape.record(&out, move |g| {
            let yd = y.data();
            let dx: Vec<T> = g
                .iter()
                .zip(yd.iter())
                .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                .collect();
            drop(yd);
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Inverted dropout: keeps an element when the f64 draw is >= `rate` and
/// scales kept activations by 1/(1-rate). Identity in eval mode, where the
/// RNG is not consumed at all.
pub fn dropout<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid {
            op: "dropout",
            detail: format!("rate must be in [0, 1), got {}", rate),
        });
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f64>() >= rate {
                keep_scale
            } else {
                T::zero()
            }
        })
        .collect();
    let data: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    ensure_finite("dropout", &data)?;
    let out = Tensor::raw(x.shape().to_vec(), data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let dx: Vec<T> = g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` [N, C]. Rows whose target equals `ignore_id` are excluded from
/// both the mean and the gradient; if every row is ignored the loss is a
/// constant zero.
pub fn cross_entropy<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    targets: &[u32],
    ignore_id: Option<u32>,
) -> Result<Tensor<T>, TensorError> {
    if logits.ndim() != 2 || logits.shape()[0] != targets.len() {
        return Err(shape_err(
            "cross_entropy",
            format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let active: Vec<usize> = (0..n)
        .filter(|&i| ignore_id.map_or(true, |ig| targets[i] != ig))
        .collect();
    for &i in &active {
        if targets[i] as usize >= c {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: targets[i] as usize,
                bound: c,
            });
        }
    }
    if active.is_empty() {
        return Ok(Tensor::scalar(T::zero()));
    }
    let m = active.len() as f64;
    let xd = logits.data();
    // softmax probabilities for the active rows, kept for the backward pass
    let mut probs = vec![T::zero(); active.len() * c];
    let mut total = 0.0f64;
    for (ai, &i) in active.iter().enumerate() {
        let row = &xd[i * c..(i + 1) * c];
        let mut mx = T::neg_infinity();
        for &v in row {
            mx = mx.maximum(v);
        }
        let mut denom = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            probs[ai * c + j] = e;
            denom += e.to_f64();
        }
        for j in 0..c {
            probs[ai * c + j] = T::from_f64(probs[ai * c + j].to_f64() / denom);
        }
        let t = targets[i] as usize;
        total -= (row[t] - mx).to_f64() - denom.ln();
    }
    drop(xd);
    let loss_val = T::from_f64(total / m);
    if !loss_val.is_finite_val() {
        return Err(TensorError::NonFinite { op: "cross_entropy" });
    }
    let out = Tensor::scalar(loss_val);
    if tape.wants(&[logits]) {
        let logits = logits.clone();
        let targets = targets.to_vec();
        tape.record(&out, move |g| {
            let gs = g[0].to_f64() / m;
            let mut dx = vec![T::zero(); n * c];
            for (ai, &i) in active.iter().enumerate() {
                let t = targets[i] as usize;
                for j in 0..c {
                    let p = probs[ai * c + j].to_f64();
                    let delta = if j == t { 1.0 } else { 0.0 };
                    dx[i * c + j] = T::from_f64(gs * (p - delta));
                }
            }
            logits.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn sum<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let total: f64 = x.data().iter().map(|v| v.to_f64()).sum();
    let v = T::from_f64(total);
    if !v.is_finite_val() {
        return Err(TensorError::NonFinite { op: "sum" });
    }
    let out = Tensor::scalar(v);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let dx = vec![g[0]; x.numel()];
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

pub fn mean<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.numel() == 0 {
        return Err(shape_err("mean", "empty tensor"));
    }
    let n = x.numel() as f64;
    let total: f64 = x.data().iter().map(|v| v.to_f64()).sum();
    let v = T::from_f64(total / n);
    if !v.is_finite_val() {
        return Err(TensorError::NonFinite { op: "mean" });
    }
    let out = Tensor::scalar(v);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let gv = T::from_f64(g[0].to_f64() / n);
            let dx = vec![gv; x.numel()];
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Sums over the trailing axis: [..., H] -> [...].
pub fn sum_last<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let h = *x.shape().last().ok_or_else(|| shape_err("sum_last", "input has rank 0"))?;
    if h == 0 {
        return Err(shape_err("sum_last", "trailing dimension is 0"));
    }
    let rows = x.numel() / h;
    let xd = x.data();
    let data: Vec<T> = (0..rows)
        .map(|r| T::from_f64(xd[r * h..(r + 1) * h].iter().map(|v| v.to_f64()).sum()))
        .collect();
    drop(xd);
    ensure_finite("sum_last", &data)?;
    let out = Tensor::raw(x.shape()[..x.ndim() - 1].to_vec(), data);
    if tape.wants(&[x]) {
        let x = x.clone();
        tape.record(&out, move |g| {
            let mut dx = vec![T::zero(); rows * h];
            for r in 0..rows {
                for j in 0..h {
                    dx[r * h + j] = g[r];
                }
            }
            x.accumulate_grad(&dx);
        });
    }
    Ok(out)
}

/// Adds -inf to attention scores [G, Lq, Lk] wherever the key position is
/// disallowed; `allowed` is laid out as G rows of Lk flags. The one op that
/// intentionally emits non-finite values; the following softmax restores
/// finiteness as long as each query keeps at least one allowed key.
pub fn add_key_mask<T: Scalar>(
    tape: &Tape<T>,
    scores: &Tensor<T>,
    allowed: &[bool],
) -> Result<Tensor<T>, TensorError> {
    if scores.ndim() != 3 {
        return Err(shape_err(
            "add_key_mask",
            format!("expected rank 3, got {:?}", scores.shape()),
        ));
    }
    let (groups, lq, lk) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    if allowed.len() != groups * lk {
        return Err(shape_err(
            "add_key_mask",
            format!("mask length {} vs {} groups x {} keys", allowed.len(), groups, lk),
        ));
    }
    let xd = scores.data();
    let mut data = vec![T::zero(); scores.numel()];
    for gidx in 0..groups {
        for q in 0..lq {
            for k in 0..lk {
                let at = (gidx * lq + q) * lk + k;
                data[at] = if allowed[gidx * lk + k] {
                    xd[at]
                } else {
                    T::neg_infinity()
                };
            }
        }
    }
    drop(xd);
    let out = Tensor::raw(scores.shape().to_vec(), data);
    if tape.wants(&[scores]) {
        let scores = scores.clone();
        tape.record(&out, move |g| scores.accumulate_grad(g));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::inference();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(add(&tape, &a, &b).unwrap().to_vec(), vec![11.0, 22.0]);
        assert_eq!(sub(&tape, &a, &b).unwrap().to_vec(), vec![-9.0, -18.0]);
        assert_eq!(mul(&tape, &a, &b).unwrap().to_vec(), vec![10.0, 40.0]);
        assert_eq!(scale(&tape, &a, 3.0).unwrap().to_vec(), vec![3.0, 6.0]);
        assert_eq!(add_scalar(&tape, &a, 1.5).unwrap().to_vec(), vec![2.5, 3.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::inference();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(add(&tape, &a, &b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let tape = Tape::inference();
        let a = t(&[1], &[1e308]);
        assert!(matches!(
            mul(&tape, &a, &a),
            Err(TensorError::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let tape = Tape::inference();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn bmm_runs_per_batch() {
        let tape = Tape::inference();
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 1], &[5.0, 6.0, 7.0, 8.0]);
        let c = bmm(&tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.to_vec(), vec![17.0, 53.0]);
    }

    #[test]
    fn permute_transposes() {
        let tape = Tape::inference();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = permute(&tape, &a, &[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = permute(&tape, &p, &[1, 0]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn permute_rank4_round_trip() {
        let tape = Tape::inference();
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let a = t(&[2, 3, 2, 2], &vals);
        let p = permute(&tape, &a, &[0, 2, 1, 3]).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3, 2]);
        let back = permute(&tape, &p, &[0, 2, 1, 3]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let tape = Tape::inference();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = concat(&tape, &[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let a2 = narrow(&tape, &c, 1, 0, 2).unwrap();
        assert_eq!(a2.to_vec(), a.to_vec());
        let b2 = narrow(&tape, &c, 1, 2, 1).unwrap();
        assert_eq!(b2.to_vec(), b.to_vec());
    }

    #[test]
    fn index_rows_gathers_and_validates() {
        let tape = Tape::inference();
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = index_rows(&tape, &x, &[2, 0, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(matches!(
            index_rows(&tape, &x, &[3]),
            Err(TensorError::Index { op: "index_rows", .. })
        ));
    }

    #[test]
    fn embedding_lookup_rejects_out_of_vocab_ids() {
        let tape = Tape::inference();
        let table = t(&[4, 2], &[0.0; 8]);
        assert!(embedding_lookup(&tape, &table, &[0, 3]).is_ok());
        assert!(matches!(
            embedding_lookup(&tape, &table, &[4]),
            Err(TensorError::Index { op: "embedding_lookup", .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape = Tape::inference();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 100.0]);
        let y = softmax(&tape, &x, 1).unwrap();
        let yd = y.to_vec();
        for r in 0..2 {
            let s: f64 = yd[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = add_scalar(&tape, &x, 50.0).unwrap();
        let ys = softmax(&tape, &shifted, 1).unwrap();
        for (a, b) in yd.iter().zip(ys.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let tape = Tape::inference();
        let x = t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]);
        let y = softmax(&tape, &x, 0).unwrap();
        let yd = y.to_vec();
        assert!((yd[0] + yd[2] - 1.0).abs() < 1e-12);
        assert!((yd[1] + yd[3] - 1.0).abs() < 1e-12);
        assert_eq!(yd[0], 0.5);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let tape = Tape::inference();
        let x = t(&[1, 4], &[0.5, -1.0, 2.0, 0.0]);
        let a = log_softmax(&tape, &x, 1).unwrap().to_vec();
        let b: Vec<f64> = softmax(&tape, &x, 1).unwrap().to_vec().iter().map(|v| v.ln()).collect();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let tape = Tape::inference();
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let y = layer_norm(&tape, &x, 1e-12).unwrap();
        let yd = y.to_vec();
        for r in 0..2 {
            let lane = &yd[r * 4..(r + 1) * 4];
            let mean: f64 = lane.iter().sum::<f64>() / 4.0;
            let var: f64 = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_handles_constant_rows() {
        let tape = Tape::inference();
        let x = t(&[1, 3], &[2.0, 2.0, 2.0]);
        let y = layer_norm(&tape, &x, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn gelu_reference_points() {
        let tape = Tape::inference();
        let x = t(&[3], &[0.0, 1.0, -1.0]);
        let y = gelu(&tape, &x).unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841192).abs() < 1e-5);
        assert!((y[2] + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_and_tanh_reference_points() {
        let tape = Tape::inference();
        let x = t(&[2], &[0.0, 1.0]);
        let s = sigmoid(&tape, &x).unwrap().to_vec();
        assert_eq!(s[0], 0.5);
        assert!((s[1] - 0.7310585786300049).abs() < 1e-12);
        let th = tanh(&tape, &x).unwrap().to_vec();
        assert_eq!(th[0], 0.0);
        assert!((th[1] - 1.0f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn dropout_eval_is_identity_without_consuming_rng() {
        use rand::RngCore;
        let tape = Tape::inference();
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = crate::util::rng_from_seed(1);
        let before = rng.clone().next_u64();
        let y = dropout(&tape, &x, 0.5, false, &mut rng).unwrap();
        assert!(y.ptr_eq(&x));
        assert_eq!(rng.next_u64(), before);
    }

    #[test]
    fn dropout_train_zeroes_roughly_rate_fraction_and_rescales() {
        let tape = Tape::inference();
        let n = 10_000;
        let x = Tensor::<f64>::full(vec![n], 1.0);
        let mut rng = crate::util::rng_from_seed(7);
        let y = dropout(&tape, &x, 0.3, true, &mut rng).unwrap();
        let yd = y.to_vec();
        let zeros = yd.iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.3).abs() < 0.02, "zero fraction {}", zeros);
        let kept = yd.iter().find(|v| **v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let tape = Tape::<f64>::inference();
        let x = t(&[1], &[1.0]);
        let mut rng = crate::util::rng_from_seed(0);
        assert!(dropout(&tape, &x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&tape, &x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let tape = Tape::inference();
        let logits = Tensor::<f64>::zeros(vec![3, 4]);
        let loss = cross_entropy(&tape, &logits, &[0, 1, 2], None).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_marked_rows() {
        let tape = Tape::inference();
        let logits = t(&[2, 2], &[5.0, 0.0, 0.0, 5.0]);
        let full = cross_entropy(&tape, &logits, &[0, 0], None).unwrap().item().unwrap();
        let part = cross_entropy(&tape, &logits, &[0, 9], Some(9)).unwrap().item().unwrap();
        // row 0 predicts its target confidently, row 1 misses badly
        assert!(part < full);
        let row0 = cross_entropy(&tape, &narrow(&tape, &logits, 0, 0, 1).unwrap(), &[0], None)
            .unwrap()
            .item()
            .unwrap();
        assert!((part - row0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let tape = Tape::inference();
        let logits = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let loss = cross_entropy(&tape, &logits, &[7, 7], Some(7)).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        assert!(!loss.requires_grad());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let tape = Tape::inference();
        let logits = t(&[1, 2], &[0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&tape, &logits, &[2], None),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn reductions_match_hand_values() {
        let tape = Tape::inference();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum(&tape, &x).unwrap().item().unwrap(), 10.0);
        assert_eq!(mean(&tape, &x).unwrap().item().unwrap(), 2.5);
        assert_eq!(sum_last(&tape, &x).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn add_bias_and_mul_last_broadcast_trailing_dim() {
        let tape = Tape::inference();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(add_bias(&tape, &x, &b).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(mul_last(&tape, &x, &b).unwrap().to_vec(), vec![10.0, 40.0, 30.0, 80.0]);
    }

    #[test]
    fn append_ones_adds_bias_column() {
        let tape = Tape::inference();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = append_ones(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 1.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn key_mask_then_softmax_zeroes_disallowed_keys() {
        let tape = Tape::inference();
        let scores = Tensor::<f64>::zeros(vec![1, 2, 3]);
        let allowed = [true, true, false];
        let masked = add_key_mask(&tape, &scores, &allowed).unwrap();
        let probs = softmax(&tape, &masked, 2).unwrap().to_vec();
        for q in 0..2 {
            assert_eq!(probs[q * 3 + 2], 0.0);
            assert!((probs[q * 3] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_query_fails_in_softmax() {
        let tape = Tape::inference();
        let scores = Tensor::<f64>::zeros(vec![1, 1, 2]);
        let masked = add_key_mask(&tape, &scores, &[false, false]).unwrap();
        assert!(matches!(
            softmax(&tape, &masked, 2),
            Err(TensorError::NonFinite { op: "softmax" })
        ));
    }

    #[test]
    fn reshape_preserves_data() {
        let tape = Tape::inference();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = reshape(&tape, &x, &[3, 2]).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(reshape(&tape, &x, &[4, 2]).is_err());
    }
}

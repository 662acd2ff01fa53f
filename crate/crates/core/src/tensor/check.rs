//! Finite-difference verification of recorded backward passes.

use super::{Tape, Tensor, TensorError};
use crate::util::rel_err;

/// Compares the taped gradient of `f` with central differences at every
/// element of `x`, returning the worst relative error.
///
/// `f` must rebuild the forward pass from scratch on the given tape and
/// return a scalar loss; any internal randomness has to be re-seeded inside
/// `f` so repeated evaluations agree. `x` is perturbed in place and restored.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tape<f64>) -> Result<Tensor<f64>, TensorError>,
{
    grad_check_named(f, &[("x", x)], eps).map(|worst| worst.1)
}

/// Multi-parameter variant; returns (name, error) for the worst offender.
pub fn grad_check_named<F>(
    f: F,
    params: &[(&str, &Tensor<f64>)],
    eps: f64,
) -> Result<(String, f64), TensorError>
where
    F: Fn(&Tape<f64>) -> Result<Tensor<f64>, TensorError>,
{
    for (name, p) in params {
        if !p.requires_grad() {
            return Err(TensorError::Invalid {
                op: "grad_check",
                detail: format!("parameter {} does not require gradients", name),
            });
        }
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.take_grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |f: &F| -> Result<f64, TensorError> {
        let tape = Tape::inference();
        f(&tape)?.item()
    };

    let mut worst = ("".to_string(), 0.0f64);
    for ((name, p), grads) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + eps;
            let up = eval(&f)?;
            p.data_mut()[i] = orig - eps;
            let down = eval(&f)?;
            p.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(numeric, grads[i]);
            if err > worst.1 {
                worst = (format!("{}[{}]", name, i), err);
            }
        }
        p.zero_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use crate::util::rng_from_seed;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::trunc_normal(shape.to_vec(), 0.8, &mut rng_from_seed(seed)).with_grad()
    }

    fn assert_grads<F>(f: F, params: &[(&str, &Tensor<f64>)])
    where
        F: Fn(&Tape<f64>) -> Result<Tensor<f64>, TensorError>,
    {
        let (name, err) = grad_check_named(f, params, EPS).unwrap();
        assert!(err < TOL, "gradient mismatch at {} (rel err {:.3e})", name, err);
    }

    #[test]
    fn catches_a_wrong_backward_pass() {
        let x = Tensor::<f64>::from_f64s(vec![2], &[0.3, -0.7]).unwrap().with_grad();
        let broken = |tape: &Tape<f64>| {
            let y = Tensor::raw(vec![2], x.data().iter().map(|&v| v * v).collect());
            if tape.wants(&[&x]) {
                let x = x.clone();
                // deliberately wrong: derivative of x^2 recorded as 3x
                tape.record(&y, move |g| {
                    let dx: Vec<f64> = g.iter().zip(x.data().iter()).map(|(gi, xi)| gi * 3.0 * xi).collect();
                    x.accumulate_grad(&dx);
                });
            }
            ops::sum(tape, &y)
        };
        let err = grad_check(broken, &x, EPS).unwrap();
        assert!(err > 0.1, "broken backward should be flagged, got {}", err);
    }

    #[test]
    fn elementwise_binary_ops() {
        let a = seeded(&[2, 3], 1);
        let b = seeded(&[2, 3], 2);
        assert_grads(
            |tape| {
                // (a + b) * (a - b), so both sides get distinct gradients
                let s = ops::add(tape, &a, &b)?;
                let d = ops::sub(tape, &a, &b)?;
                let m = ops::mul(tape, &s, &d)?;
                ops::sum(tape, &m)
            },
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn scale_and_add_scalar() {
        let a = seeded(&[4], 3);
        assert_grads(
            |tape| {
                let y = ops::scale(tape, &a, -1.7)?;
                let z = ops::add_scalar(tape, &y, 0.4)?;
                ops::mean(tape, &z)
            },
            &[("a", &a)],
        );
    }

    #[test]
    fn matmul_both_sides() {
        let a = seeded(&[3, 4], 4);
        let b = seeded(&[4, 2], 5);
        assert_grads(
            |tape| {
                let y = ops::matmul(tape, &a, &b)?;
                ops::sum(tape, &y)
            },
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn matmul_with_nonuniform_downstream() {
        let a = seeded(&[2, 3], 6);
        let b = seeded(&[3, 3], 7);
        assert_grads(
            |tape| {
                let y = ops::matmul(tape, &a, &b)?;
                let sq = ops::mul(tape, &y, &y)?;
                ops::sum(tape, &sq)
            },
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn bmm_both_sides() {
        let a = seeded(&[2, 2, 3], 8);
        let b = seeded(&[2, 3, 2], 9);
        assert_grads(
            |tape| {
                let y = ops::bmm(tape, &a, &b)?;
                let sq = ops::mul(tape, &y, &y)?;
                ops::sum(tape, &sq)
            },
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn permute_reshape_narrow_concat() {
        let a = seeded(&[2, 3, 2], 10);
        let b = seeded(&[2, 1, 2], 11);
        assert_grads(
            |tape| {
                let c = ops::concat(tape, &[a.clone(), b.clone()], 1)?;
                let p = ops::permute(tape, &c, &[2, 0, 1])?;
                let r = ops::reshape(tape, &p, &[4, 4])?;
                let nw = ops::narrow(tape, &r, 1, 1, 3)?;
                let sq = ops::mul(tape, &nw, &nw)?;
                ops::sum(tape, &sq)
            },
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn index_rows_accumulates_duplicates() {
        let x = seeded(&[3, 2], 12);
        assert_grads(
            |tape| {
                let y = ops::index_rows(tape, &x, &[0, 2, 0])?;
                let sq = ops::mul(tape, &y, &y)?;
                ops::sum(tape, &sq)
            },
            &[("x", &x)],
        );
    }

    #[test]
    fn softmax_all_axes() {
        let x = seeded(&[2, 3, 2], 13);
        for axis in 0..3 {
            assert_grads(
                |tape| {
                    let y = ops::softmax(tape, &x, axis)?;
                    let w = seeded(&[2, 3, 2], 99).detach();
                    let m = ops::mul(tape, &y, &w)?;
                    ops::sum(tape, &m)
                },
                &[("x", &x)],
            );
        }
    }

    #[test]
    fn log_softmax_gradient() {
        let x = seeded(&[3, 4], 14);
        assert_grads(
            |tape| {
                let y = ops::log_softmax(tape, &x, 1)?;
                let w = seeded(&[3, 4], 98).detach();
                let m = ops::mul(tape, &y, &w)?;
                ops::sum(tape, &m)
            },
            &[("x", &x)],
        );
    }

    #[test]
    fn layer_norm_gradient() {
        let x = seeded(&[3, 5], 15);
        assert_grads(
            |tape| {
                let y = ops::layer_norm(tape, &x, 1e-5)?;
                let w = seeded(&[3, 5], 97).detach();
                let m = ops::mul(tape, &y, &w)?;
                ops::sum(tape, &m)
            },
            &[("x", &x)],
        );
    }

    #[test]
    fn layer_norm_with_gain_and_bias() {
        let x = seeded(&[2, 4], 16);
        let gain = seeded(&[4], 17);
        let bias = seeded(&[4], 18);
        assert_grads(
            |tape| {
                let y = ops::layer_norm(tape, &x, 1e-5)?;
                let g = ops::mul_last(tape, &y, &gain)?;
                let z = ops::add_bias(tape, &g, &bias)?;
                let sq = ops::mul(tape, &z, &z)?;
                ops::sum(tape, &sq)
            },
            &[("x", &x), ("gain", &gain), ("bias", &bias)],
        );
    }

    #[test]
    fn activations() {
        let x = seeded(&[6], 19);
        assert_grads(
            |tape| {
                let a = ops::gelu(tape, &x)?;
                let b = ops::tanh(tape, &a)?;
                let c = ops::sigmoid(tape, &b)?;
                ops::sum(tape, &c)
            },
            &[("x", &x)],
        );
    }

    #[test]
    fn dropout_gradient_with_reseeded_mask() {
        let x = seeded(&[8], 20);
        assert_grads(
            |tape| {
                let mut rng = rng_from_seed(42);
                let y = ops::dropout(tape, &x, 0.5, true, &mut rng)?;
                let sq = ops::mul(tape, &y, &y)?;
                ops::sum(tape, &sq)
            },
            &[("x", &x)],
        );
    }

    #[test]
    fn cross_entropy_gradient_with_ignored_rows() {
        let x = seeded(&[4, 3], 21);
        assert_grads(
            |tape| ops::cross_entropy(tape, &x, &[0, 2, 9, 1], Some(9)),
            &[("x", &x)],
        );
    }

    #[test]
    fn bias_and_gain_ops() {
        let x = seeded(&[3, 4], 22);
        let b = seeded(&[4], 23);
        assert_grads(
            |tape| {
                let y = ops::add_bias(tape, &x, &b)?;
                let z = ops::mul_last(tape, &y, &b)?;
                let sq = ops::mul(tape, &z, &z)?;
                ops::sum(tape, &sq)
            },
            &[("x", &x), ("b", &b)],
        );
    }

    #[test]
    fn append_ones_gradient() {
        let x = seeded(&[3, 2], 24);
        let w = seeded(&[3, 2], 25);
        assert_grads(
            |tape| {
                let y = ops::append_ones(tape, &x)?;
                let z = ops::matmul(tape, &y, &ops::append_ones(tape, &w)?)?;
                ops::sum(tape, &z)
            },
            &[("x", &x), ("w", &w)],
        );
    }

    #[test]
    fn attention_block_end_to_end() {
        // one head of scaled dot-product attention with a padded key
        let q = seeded(&[1, 3, 4], 26);
        let k = seeded(&[1, 3, 4], 27);
        let v = seeded(&[1, 3, 4], 28);
        let allowed = [true, true, false];
        assert_grads(
            |tape| {
                let kt = ops::permute(tape, &k, &[0, 2, 1])?;
                let scores = ops::bmm(tape, &q, &kt)?;
                let scaled = ops::scale(tape, &scores, 0.5)?;
                let masked = ops::add_key_mask(tape, &scaled, &allowed)?;
                let probs = ops::softmax(tape, &masked, 2)?;
                let ctx = ops::bmm(tape, &probs, &v)?;
                let sq = ops::mul(tape, &ctx, &ctx)?;
                ops::sum(tape, &sq)
            },
            &[("q", &q), ("k", &k), ("v", &v)],
        );
    }

    #[test]
    fn sum_mean_sum_last() {
        let x = seeded(&[2, 3], 29);
        assert_grads(
            |tape| {
                let s = ops::sum_last(tape, &x)?;
                let sq = ops::mul(tape, &s, &s)?;
                ops::mean(tape, &sq)
            },
            &[("x", &x)],
        );
    }
}

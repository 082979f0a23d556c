//! Central finite-difference verification of analytic gradients.
//!
//! The checker treats the function under test as a black box
//! `loss: params -> scalar` and never touches the tape's backward path, so
//! it stays an independent oracle. Stochastic graphs are handled by keeping
//! the seed fixed across perturbed evaluations.

use crate::scalar::Scalar;

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x0`.
pub fn central_diff<F: Scalar>(mut f: impl FnMut(&[F]) -> F, x0: &[F], step: F) -> Vec<F> {
    let mut grad = vec![F::zero(); x0.len()];
    let mut x = x0.to_vec();
    let two = F::fromf(2.0);
    for i in 0..x0.len() {
        x[i] = x0[i] + step;
        let up = f(&x);
        x[i] = x0[i] - step;
        let down = f(&x);
        x[i] = x0[i];
        grad[i] = (up - down) / (two * step);
    }
    grad
}

/// Per-coordinate relative error with a floor that keeps near-zero
/// coordinates from dominating: `max_i |a_i-b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_error<F: Scalar>(analytic: &[F], numeric: &[F], floor: F) -> F {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = F::zero();
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((*a - *n).abs() / denom);
    }
    worst
}

/// Tensor-granular relative error: `||a - n||_inf / max(||a||_inf,
/// ||n||_inf, floor)`. In single precision the difference quotient carries
/// rounding noise of order `eps * |loss| / step` on every coordinate, so
/// near-zero coordinates of a healthy gradient fail a per-coordinate test;
/// comparing against the gradient's own scale is the meaningful check (a
/// genuine VJP defect perturbs coordinates on that scale).
pub fn norm_rel_error<F: Scalar>(analytic: &[F], numeric: &[F], floor: F) -> F {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[F]| v.iter().fold(F::zero(), |m, x| m.max(x.abs()));
    let mut diff = F::zero();
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max((*a - *n).abs());
    }
    diff / inf(analytic).max(inf(numeric)).max(floor)
}

/// Asserts the analytic gradient of `f` at `x0` against central differences.
///
/// `step` and `tol` follow the conventions of single-precision checks
/// (step 1e-3, relative tolerance 1e-2 unless a caller tightens them).
pub fn assert_grad_matches<F: Scalar>(
    name: &str,
    f: impl FnMut(&[F]) -> F,
    x0: &[F],
    analytic: &[F],
    step: F,
    tol: F,
) {
    let numeric = central_diff(f, x0, step);
    let err = max_rel_error(analytic, &numeric, F::fromf(1e-3));
    assert!(
        err <= tol,
        "{name}: gradient mismatch, max rel err {err}\n analytic: {analytic:?}\n numeric:  {numeric:?}"
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_polynomial_derivative() {
        // f(x, y) = x^2 y + 3y
        let f = |v: &[f64]| v[0] * v[0] * v[1] + 3.0 * v[1];
        let x0 = [1.5f64, -2.0];
        let g = central_diff(f, &x0, 1e-5);
        let expect = [2.0 * 1.5 * -2.0, 1.5 * 1.5 + 3.0];
        assert!((g[0] - expect[0]).abs() < 1e-8);
        assert!((g[1] - expect[1]).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floor_ignores_tiny_noise() {
        let a = [1e-9f32, 1.0];
        let b = [0.0f32, 1.0];
        assert!(max_rel_error(&a, &b, 1e-3) < 1e-5);
    }
}

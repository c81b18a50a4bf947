/// Central-difference gradient of `f` at `params` with step `h`.
pub fn central_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// |a - n| / max(|a|, |n|, 1): absolute near zero, relative elsewhere.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Worst-case relative error between `analytic` and the central-difference
/// gradient of `f`. The go/no-go number for every gradient in this crate.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let numeric = central_difference_gradient(f, params, h);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        // f(x) = x0^2 + 3 x0 x1; grad = [2 x0 + 3 x1, 3 x0].
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[0] * p[1];
        let at = [1.5, -2.0];
        let analytic = [2.0 * 1.5 + 3.0 * -2.0, 3.0 * 1.5];
        // Central differences are exact on quadratics up to rounding.
        let err = finite_diff_check(f, &at, &analytic, 1e-4);
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |p: &[f64]| p[0].powi(3);
        let err = finite_diff_check(f, &[2.0], &[11.0], 1e-5); // true grad is 12
        assert!(err > 0.05, "err = {err}");
    }

    #[test]
    fn relative_error_floors_at_one() {
        // Near-zero pairs are compared absolutely, not relatively.
        assert!(relative_error(1e-9, 0.0) < 1e-8);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}

//! Central finite-difference verification of hand-derived gradients.

use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// Checks every parameter. See [`finite_diff_check_subset`].
pub fn finite_diff_check<F>(theta: &[f64], epsilon: f64, f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..theta.len()).collect();
    finite_diff_check_subset(theta, epsilon, &all, f)
}

/// Compares the analytic gradient returned by `f(theta)` against central
/// differences `(f(theta + e) - f(theta - e)) / 2e` on the given parameter
/// indices and returns the largest relative error
/// `|analytic - numeric| / max(|numeric|, RELATIVE_ERROR_FLOOR)`.
pub fn finite_diff_check_subset<F>(
    theta: &[f64],
    epsilon: f64,
    indices: &[usize],
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let (loss, analytic) = f(theta);
    if !loss.is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    if analytic.len() != theta.len() {
        return Err(Error::shape(
            "finite_diff_check",
            &[theta.len()],
            &[analytic.len()],
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let (plus, _) = f(&probe);
        probe[i] = orig - epsilon;
        let (minus, _) = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(RELATIVE_ERROR_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::layers::{affine_backward, affine_forward, LayerParams};
    use crate::tensor::loss::softmax_cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_loss(theta: &[f64], x: &[f64], coeffs: &[f64]) -> (f64, Vec<f64>) {
        let mut p = LayerParams::zeros(coeffs.len(), x.len());
        p.set_flat(theta);
        let y = affine_forward(x, &p).unwrap();
        let loss = y.iter().zip(coeffs).map(|(a, b)| a * b).sum();
        let (g, _) = affine_backward(x, &p, coeffs).unwrap();
        (loss, g.flat())
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = finite_diff_check(&theta, 1e-5, |t| linear_loss(t, &x, &c)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_layer_passes() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta: Vec<f64> = (0..4 * 6 + 4)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let err = finite_diff_check(&theta, 1e-5, |t| {
                let mut p = LayerParams::zeros(4, 6);
                p.set_flat(t);
                let z = affine_forward(&x, &p).unwrap();
                let (l, gz) = softmax_cross_entropy(&z, 2).unwrap();
                let (g, _) = affine_backward(&x, &p, &gz).unwrap();
                (l, g.flat())
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sabotaged_gradient_is_caught() {
        let x = [0.3, -0.7, 1.1];
        let c = [1.0, -2.0];
        let theta: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let err = finite_diff_check(&theta, 1e-5, |t| {
            let (l, g) = linear_loss(t, &x, &c);
            (l, g.iter().map(|v| v * 2.0).collect())
        })
        .unwrap();
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite_loss() {
        assert!(finite_diff_check(&[1.0], 0.1, |_| (0.0, vec![0.0])).is_err());
        assert!(matches!(
            finite_diff_check(&[1.0], 1e-5, |_| (f64::NAN, vec![0.0])),
            Err(Error::NonFinite(_))
        ));
    }
}

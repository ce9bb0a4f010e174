use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss = log_z - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy against an arbitrary target distribution (soft labels).
pub fn softmax_cross_entropy_soft(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != logits.len() {
        return Err(Error::shape(
            "softmax_cross_entropy_soft",
            &[logits.len()],
            &[target.len()],
        ));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss: f64 = target
        .iter()
        .zip(logits)
        .map(|(t, z)| t * (log_z - z))
        .sum();
    let p = softmax(logits);
    let total: f64 = target.iter().sum();
    let grad = p
        .iter()
        .zip(target)
        .map(|(pi, ti)| total * pi - ti)
        .collect();
    Ok((loss, grad))
}

/// Mean squared error and gradient `2 (prediction - target) / N`.
pub fn mse_loss(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::shape(
            "mse_loss",
            &[prediction.len()],
            &[target.len()],
        ));
    }
    let n = prediction.len() as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean per-unit binary cross-entropy of `sigmoid(logits)` against targets in
/// `[0, 1]`; gradient with respect to the logits.
pub fn sigmoid_bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(
            "sigmoid_bce_with_logits",
            &[logits.len()],
            &[targets.len()],
        ));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            // log(1 + e^{-|z|}) + max(z, 0) - z t
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - t) / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_c() {
        let (loss, _) = softmax_cross_entropy(&[0.3; 7], 4).unwrap();
        assert!((loss - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn large_logit_gap_is_stable() {
        let (loss, grad) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn out_of_range_label_is_error() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let target = rng.random_range(0..5);
            let err =
                finite_diff_check(&logits, 1e-5, |z| softmax_cross_entropy(z, target).unwrap())
                    .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn mse_identity_and_offset() {
        let t = [0.1, 0.5, -2.0];
        let (l, g) = mse_loss(&t, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        let (l, _) = mse_loss(&p, &t).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!(mse_loss(&t, &t[..2]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = finite_diff_check(&p, 1e-5, |x| mse_loss(x, &t).unwrap()).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let err = finite_diff_check(&z, 1e-5, |x| sigmoid_bce_with_logits(x, &t).unwrap()).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn soft_ce_with_onehot_matches_hard_ce() {
        let z = [0.2, -1.0, 3.0];
        let (a, ga) = softmax_cross_entropy(&z, 1).unwrap();
        let (b, gb) = softmax_cross_entropy_soft(&z, &[0.0, 1.0, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

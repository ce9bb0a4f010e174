use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::loss::softmax_cross_entropy_soft;
use crate::tensor::{affine_forward, softmax, softmax_cross_entropy, Grid, LayerParams};

use super::{ClassDistribution, FeatureVector};

/// Single fully connected softmax layer over pooled features.
///
/// Classes can be marked untrainable: their row keeps its parameters (zero
/// by default) and still takes part in the softmax. The novel-class slot is
/// held this way during pre-training so it acts as a fixed reference logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    params: LayerParams,
    trainable: Vec<bool>,
}

impl Classifier {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Classifier {
            params: LayerParams::zeros(num_classes, feature_dim),
            trainable: vec![true; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.params.fan_out()
    }

    pub fn feature_dim(&self) -> usize {
        self.params.fan_in()
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn set_trainable(&mut self, class: usize, trainable: bool) {
        self.trainable[class] = trainable;
    }

    pub fn set_all_trainable(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = true);
    }

    pub fn is_trainable(&self, class: usize) -> bool {
        self.trainable[class]
    }

    pub fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        affine_forward(features.values(), &self.params)
    }

    pub fn forward(&self, features: &FeatureVector) -> Result<ClassDistribution> {
        Ok(ClassDistribution::from_probs_unchecked(softmax(
            &self.logits(features)?,
        )))
    }

    /// Mean-gradient SGD step on a batch. Untrainable rows are left untouched.
    pub fn train_step(
        &mut self,
        batch: &[(&FeatureVector, usize)],
        learning_rate: f64,
    ) -> Result<f64> {
        let v = self.num_classes();
        let mut out = Vec::with_capacity(batch.len());
        for (features, label) in batch {
            if *label >= v {
                return Err(Error::LabelOutOfRange {
                    label: *label,
                    classes: v,
                });
            }
            out.push((
                *features,
                softmax_cross_entropy(&self.logits(features)?, *label)?,
            ));
        }
        self.apply(&out, learning_rate)
    }

    /// As [`Classifier::train_step`] with full target distributions.
    pub fn train_step_soft(
        &mut self,
        batch: &[(&FeatureVector, &[f64])],
        learning_rate: f64,
    ) -> Result<f64> {
        let out = batch
            .iter()
            .map(|(f, t)| Ok((*f, softmax_cross_entropy_soft(&self.logits(f)?, t)?)))
            .collect::<Result<Vec<_>>>()?;
        self.apply(&out, learning_rate)
    }

    fn apply(
        &mut self,
        per_sample: &[(&FeatureVector, (f64, Vec<f64>))],
        learning_rate: f64,
    ) -> Result<f64> {
        if per_sample.is_empty() {
            return Err(Error::InvalidArgument("empty classifier batch".into()));
        }
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad learning rate {learning_rate}"
            )));
        }
        let n = per_sample.len() as f64;
        let scale = learning_rate / n;
        if scale > 0.0 {
            let d = self.feature_dim();
            for (features, (_, g)) in per_sample {
                let x = features.values();
                let nz: Vec<usize> = (0..d).filter(|&i| x[i] != 0.0).collect();
                for (c, &gc) in g.iter().enumerate() {
                    if !self.trainable[c] || gc == 0.0 {
                        continue;
                    }
                    let row = &mut self.params.weights.data_mut()[c * d..(c + 1) * d];
                    for &i in &nz {
                        row[i] -= scale * gc * x[i];
                    }
                    self.params.biases.data_mut()[c] -= scale * gc;
                }
            }
        }
        Ok(per_sample.iter().map(|(_, (l, _))| l).sum::<f64>() / n)
    }

    /// Mean batch loss and its gradient with respect to the flattened
    /// parameters (weights then biases), untrainable rows included.
    pub fn loss_and_grad(&self, batch: &[(&FeatureVector, usize)]) -> Result<(f64, Vec<f64>)> {
        let d = self.feature_dim();
        let v = self.num_classes();
        let mut grad = vec![0.0; v * d + v];
        let mut total = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for (features, label) in batch {
            let (loss, g) = softmax_cross_entropy(&self.logits(features)?, *label)?;
            total += loss * inv;
            for (c, gc) in g.iter().enumerate() {
                for (i, x) in features.values().iter().enumerate() {
                    grad[c * d + i] += gc * x * inv;
                }
                grad[v * d + c] += gc * inv;
            }
        }
        Ok((total, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("weights", self.params.weights.clone());
        c.insert("biases", self.params.biases.clone());
        c.insert(
            "trainable",
            Grid::vector(
                self.trainable
                    .iter()
                    .map(|&t| if t { 1.0 } else { 0.0 })
                    .collect(),
            ),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let params = LayerParams::new(c.get("weights")?.clone(), c.get("biases")?.clone(), false)?;
        let trainable: Vec<bool> = c
            .get("trainable")?
            .data()
            .iter()
            .map(|&v| v != 0.0)
            .collect();
        if trainable.len() != params.fan_out() {
            return Err(Error::Checkpoint("classifier trainable mask length".into()));
        }
        Ok(Classifier { params, trainable })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: Vec<f64>) -> FeatureVector {
        FeatureVector::new(v)
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let c = Classifier::new(4, 3);
        let p = c.forward(&fv(vec![1.0, -2.0, 0.5])).unwrap();
        assert!(p.probs().iter().all(|&q| (q - 0.25).abs() < 1e-15));
    }

    #[test]
    fn output_sums_to_one_for_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Classifier::new(5, 6);
        c.params_mut()
            .weights
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-3.0..3.0));
        let x = fv((0..6).map(|_| rng.random_range(0.0..2.0)).collect());
        let p = c.forward(&x).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let c = Classifier::new(3, 4);
        assert!(c.forward(&fv(vec![1.0; 5])).is_err());
    }

    #[test]
    fn separable_toy_set_reaches_full_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centres = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
        let data: Vec<(FeatureVector, usize)> = (0..50)
            .map(|i| {
                let c = i % 3;
                let v = centres[c]
                    .iter()
                    .map(|m| m + rng.random_range(-0.5..0.5))
                    .collect();
                (fv(v), c)
            })
            .collect();
        let mut clf = Classifier::new(3, 3);
        for _ in 0..200 {
            let batch: Vec<_> = data.iter().map(|(x, y)| (x, *y)).collect();
            clf.train_step(&batch, 0.5).unwrap();
        }
        let correct = data
            .iter()
            .filter(|(x, y)| clf.forward(x).unwrap().argmax() == *y)
            .count();
        assert_eq!(correct, 50);
    }

    #[test]
    fn soft_one_hot_matches_hard_step() {
        let x = fv(vec![0.4, -1.0, 2.0]);
        let mut a = Classifier::new(3, 3);
        let mut b = a.clone();
        a.train_step(&[(&x, 1)], 0.3).unwrap();
        b.train_step_soft(&[(&x, &[0.0, 1.0, 0.0][..])], 0.3)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_and_bad_label() {
        let mut c = Classifier::new(3, 2);
        let before = c.clone();
        let x = fv(vec![1.0, 1.0]);
        c.train_step(&[(&x, 1)], 0.0).unwrap();
        assert_eq!(c, before);
        assert!(matches!(
            c.train_step(&[(&x, 3)], 0.1),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn single_sample_loss_decreases_monotonically() {
        let mut c = Classifier::new(4, 3);
        let x = fv(vec![0.5, 1.0, -0.3]);
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let l = c.train_step(&[(&x, 2)], 0.1).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 0.05, "{prev}");
    }

    #[test]
    fn gradient_passes_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = Classifier::new(4, 5);
            c.params_mut()
                .weights
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-1.0..1.0));
            let xs: Vec<FeatureVector> = (0..3)
                .map(|_| fv((0..5).map(|_| rng.random_range(0.0..1.0)).collect()))
                .collect();
            let batch: Vec<_> = xs.iter().enumerate().map(|(i, x)| (x, i % 4)).collect();
            let err = finite_diff_check(&c.params().flat(), 1e-5, |theta| {
                let mut m = c.clone();
                m.params_mut().set_flat(theta);
                m.loss_and_grad(&batch).unwrap()
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn train_step_follows_loss_gradient_and_skips_frozen_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut c = Classifier::new(3, 4);
        c.params_mut()
            .weights
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-1.0..1.0));
        let xs: Vec<FeatureVector> = (0..2)
            .map(|_| fv((0..4).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        let batch: Vec<_> = vec![(&xs[0], 0), (&xs[1], 1)];
        let (_, g) = c.loss_and_grad(&batch).unwrap();
        let mut want = c.params().flat();
        for (w, gi) in want.iter_mut().zip(&g) {
            *w -= 0.3 * gi;
        }
        c.set_trainable(2, false);
        let frozen_row = c.params().weights.data()[8..12].to_vec();
        let frozen_bias = c.params().biases.data()[2];
        c.train_step(&batch, 0.3).unwrap();
        let got = c.params().flat();
        for i in 0..8 {
            assert!((got[i] - want[i]).abs() < 1e-14);
        }
        assert_eq!(&got[8..12], &frozen_row[..]);
        assert_eq!(got[14], frozen_bias);
    }
}

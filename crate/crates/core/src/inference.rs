//! Evaluation-time classification: the interpolated LTM + STM mixture before
//! consolidation and the LTM alone afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltm::{ClassDistribution, FeatureVector, Ltm};
use crate::stm::Aha;
use crate::tensor::Grid;

/// Mixture weights as integer parts of [`InterpolationWeights::DENOMINATOR`],
/// so the sum-to-one invariant is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpolationWeights {
    pub ltm: u32,
    pub aha: u32,
    pub uniform: u32,
}

impl Default for InterpolationWeights {
    fn default() -> Self {
        InterpolationWeights {
            ltm: 495,
            aha: 495,
            uniform: 10,
        }
    }
}

impl InterpolationWeights {
    pub const DENOMINATOR: u32 = 1000;

    pub fn new(ltm: u32, aha: u32, uniform: u32) -> Result<Self> {
        let w = InterpolationWeights { ltm, aha, uniform };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ltm + self.aha + self.uniform != Self::DENOMINATOR {
            return Err(Error::Config(format!(
                "interpolation weights {}+{}+{} must sum to {}",
                self.ltm,
                self.aha,
                self.uniform,
                Self::DENOMINATOR
            )));
        }
        Ok(())
    }

    pub fn as_f64(&self) -> (f64, f64, f64) {
        let d = Self::DENOMINATOR as f64;
        (
            self.ltm as f64 / d,
            self.aha as f64 / d,
            self.uniform as f64 / d,
        )
    }
}

/// `w_ltm p_ltm + w_aha p_aha + w_uniform / V`.
pub fn mix(
    p_ltm: &ClassDistribution,
    p_aha: &ClassDistribution,
    weights: &InterpolationWeights,
) -> Result<ClassDistribution> {
    weights.validate()?;
    let v = p_ltm.num_classes();
    if p_aha.num_classes() != v {
        return Err(Error::shape("interpolate", &[v], &[p_aha.num_classes()]));
    }
    let (wl, wa, wu) = weights.as_f64();
    let floor = wu / v as f64;
    ClassDistribution::new(
        p_ltm
            .probs()
            .iter()
            .zip(p_aha.probs())
            .map(|(l, a)| wl * l + wa * a + floor)
            .collect(),
    )
}

pub fn short_term_infer(
    image: &Grid,
    ltm: &Ltm,
    stm: &Aha,
    weights: &InterpolationWeights,
) -> Result<ClassDistribution> {
    short_term_infer_features(&ltm.extract_features(image)?, ltm, stm, weights)
}

pub fn short_term_infer_features(
    features: &FeatureVector,
    ltm: &Ltm,
    stm: &Aha,
    weights: &InterpolationWeights,
) -> Result<ClassDistribution> {
    let p_ltm = ltm.classifier_forward(features)?;
    let p_aha = stm.recall_features(features)?.label_dist;
    mix(&p_ltm, &p_aha, weights)
}

pub fn long_term_infer(image: &Grid, ltm: &Ltm) -> Result<ClassDistribution> {
    ltm.classifier_forward(&ltm.extract_features(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_inputs_give_uniform_output() {
        let u = ClassDistribution::uniform(20);
        let p = mix(&u, &u, &InterpolationWeights::default()).unwrap();
        assert!(p.probs().iter().all(|q| (q - 0.05).abs() < 1e-15));
    }

    #[test]
    fn agreement_and_disagreement_arithmetic() {
        let w = InterpolationWeights::default();
        let c = ClassDistribution::one_hot(20, 7);
        let p = mix(&c, &c, &w).unwrap();
        assert!((p.probs()[7] - 0.9905).abs() < 1e-12);
        let p = mix(
            &ClassDistribution::one_hot(20, 9),
            &ClassDistribution::one_hot(20, 4),
            &w,
        )
        .unwrap();
        assert!((p.probs()[9] - 0.4955).abs() < 1e-12);
        assert!((p.probs()[4] - 0.4955).abs() < 1e-12);
        assert_eq!(p.argmax(), 4);
    }

    #[test]
    fn weights_must_sum_to_denominator() {
        assert!(InterpolationWeights::new(500, 500, 10).is_err());
        assert!(InterpolationWeights::new(1000, 0, 0).is_ok());
    }

    #[test]
    fn size_mismatch_is_error() {
        let w = InterpolationWeights::default();
        assert!(mix(
            &ClassDistribution::uniform(3),
            &ClassDistribution::uniform(4),
            &w
        )
        .is_err());
    }
}

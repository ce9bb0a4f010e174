//! Long-term memory: sparse convolutional autoencoder features, interest
//! filtering, pooling and a softmax classifier.

mod classifier;
mod scae;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use classifier::Classifier;
pub use scae::{EncodeTrace, Gates, LifetimeMasks, Scae, ScaeConfig};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::interest::{apply_mask, interest_mask, DoGParams};
use crate::tensor::{argmax, Grid};

/// Layout version of the LTM state inside a checkpoint.
pub const LTM_STATE_VERSION: u32 = 1;

/// SCAE hidden activity `[F, H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMap {
    pub values: Grid,
    pub spatial_k: usize,
}

impl SparseFeatureMap {
    pub fn num_filters(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// Largest number of nonzero channels found at any spatial position.
    pub fn max_active_per_position(&self) -> usize {
        let f = self.num_filters();
        let plane = self.values.len() / f;
        (0..plane)
            .map(|p| {
                (0..f)
                    .filter(|&k| self.values.data()[k * plane + p] != 0.0)
                    .count()
            })
            .max()
            .unwrap_or(0)
    }

    /// Non-overlapping max pooling; border windows may be partial.
    pub fn max_pool(&self, pool: usize) -> Grid {
        let f = self.num_filters();
        let (h, w) = self.spatial_shape();
        let (ph, pw) = (h.div_ceil(pool), w.div_ceil(pool));
        let mut out = Grid::filled(&[f, ph, pw], f64::NEG_INFINITY);
        {
            let data = out.data_mut();
            for k in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let v = self.values.at3(k, y, x);
                        let slot = &mut data[(k * ph + y / pool) * pw + x / pool];
                        if v > *slot {
                            *slot = v;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Flattened pooled encoding fed to the classifier and the hippocampal memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Probability vector over the class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {s}")));
        }
        Ok(ClassDistribution(probs))
    }

    pub(crate) fn from_probs_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        ClassDistribution(probs)
    }

    pub fn uniform(classes: usize) -> Self {
        ClassDistribution(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, class: usize) -> Self {
        let mut p = vec![0.0; classes];
        p[class] = 1.0;
        ClassDistribution(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn confidence(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|p| (0.0..=1.0).contains(p))
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= Self::SUM_TOLERANCE
    }
}

/// Where the interest mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Multiply the SCAE encoding position-wise.
    Encoding,
    /// Multiply the raw image before encoding (ablation).
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtmConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub scae: ScaeConfig,
    pub interest: DoGParams,
    pub mask_target: MaskTarget,
}

impl Default for LtmConfig {
    fn default() -> Self {
        LtmConfig {
            image_size: 52,
            num_classes: 20,
            scae: ScaeConfig::default(),
            interest: DoGParams::default(),
            mask_target: MaskTarget::Encoding,
        }
    }
}

impl LtmConfig {
    pub fn validate(&self) -> Result<()> {
        self.scae.validate()?;
        self.interest.validate()?;
        if self.image_size < self.scae.receptive_field {
            return Err(Error::InvalidArgument(format!(
                "image size {} smaller than receptive field {}",
                self.image_size, self.scae.receptive_field
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        let s = self.scae.pooled_side(self.image_size);
        self.scae.num_filters * s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ltm {
    config: LtmConfig,
    scae: Scae,
    classifier: Classifier,
}

impl Ltm {
    pub fn new(config: LtmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let scae = Scae::new(config.scae.clone(), rng)?;
        let classifier = Classifier::new(config.num_classes, config.feature_dim());
        Ok(Ltm {
            config,
            scae,
            classifier,
        })
    }

    pub fn config(&self) -> &LtmConfig {
        &self.config
    }

    pub fn scae(&self) -> &Scae {
        &self.scae
    }

    pub fn scae_mut(&mut self) -> &mut Scae {
        &mut self.scae
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Classifier {
        &mut self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn freeze_scae(&mut self) {
        self.scae.freeze();
    }

    fn check_image(&self, image: &Grid) -> Result<()> {
        image.ensure_shape(
            "LTM input",
            &[self.config.image_size, self.config.image_size],
        )
    }

    /// Encode, interest-mask, max-pool and flatten. Requires a frozen SCAE.
    pub fn extract_features(&self, image: &Grid) -> Result<FeatureVector> {
        if !self.scae.is_frozen() {
            return Err(Error::NotFrozen("SCAE"));
        }
        self.check_image(image)?;
        let encoding = match self.config.mask_target {
            MaskTarget::Encoding => {
                let enc = self.scae.encode(image)?;
                let mask = interest_mask(image, &self.config.interest, enc.spatial_shape())?;
                apply_mask(&enc, &mask)?
            }
            MaskTarget::Image => {
                let side = self.config.image_size;
                let mask = interest_mask(image, &self.config.interest, (side, side))?;
                let masked = Grid::new(
                    vec![side, side],
                    image
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(a, b)| a * b)
                        .collect(),
                )?;
                self.scae.encode(&masked)?
            }
        };
        Ok(FeatureVector(
            encoding.max_pool(self.config.scae.pool_size).into_data(),
        ))
    }

    pub fn classifier_forward(&self, features: &FeatureVector) -> Result<ClassDistribution> {
        self.classifier.forward(features)
    }

    pub fn classifier_train_step(
        &mut self,
        batch: &[(&FeatureVector, usize)],
        learning_rate: f64,
    ) -> Result<f64> {
        self.classifier.train_step(batch, learning_rate)
    }

    /// Full LTM state as checkpoint entries.
    pub fn snapshot(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_scalar("version", LTM_STATE_VERSION as f64);
        c.insert_scalar("image_size", self.config.image_size as f64);
        c.insert_scalar("num_classes", self.config.num_classes as f64);
        let d = &self.config.interest;
        c.insert(
            "interest",
            Grid::vector(vec![
                d.kernel_size as f64,
                d.sigma,
                d.sigma_ratio,
                d.smoothing_sigma,
                d.keep_fraction,
            ]),
        );
        c.insert_scalar(
            "mask_target",
            match self.config.mask_target {
                MaskTarget::Encoding => 0.0,
                MaskTarget::Image => 1.0,
            },
        );
        c.merge_section("scae/", self.scae.to_checkpoint());
        c.merge_section("classifier/", self.classifier.to_checkpoint());
        c
    }

    pub fn from_snapshot(c: &Checkpoint) -> Result<Self> {
        let version = c.scalar_usize("version")? as u32;
        if version != LTM_STATE_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: LTM_STATE_VERSION,
            });
        }
        let i = c.get("interest")?.data();
        if i.len() != 5 {
            return Err(Error::Checkpoint("interest params".into()));
        }
        let scae = Scae::from_checkpoint(&c.section("scae/"))?;
        let config = LtmConfig {
            image_size: c.scalar_usize("image_size")?,
            num_classes: c.scalar_usize("num_classes")?,
            scae: scae.config().clone(),
            interest: DoGParams {
                kernel_size: i[0] as usize,
                sigma: i[1],
                sigma_ratio: i[2],
                smoothing_sigma: i[3],
                keep_fraction: i[4],
            },
            mask_target: if c.scalar("mask_target")? == 0.0 {
                MaskTarget::Encoding
            } else {
                MaskTarget::Image
            },
        };
        config.validate()?;
        let classifier = Classifier::from_checkpoint(&c.section("classifier/"))?;
        if classifier.feature_dim() != config.feature_dim()
            || classifier.num_classes() != config.num_classes
        {
            return Err(Error::Checkpoint(
                "classifier shape does not match config".into(),
            ));
        }
        Ok(Ltm {
            config,
            scae,
            classifier,
        })
    }

    pub fn restore(&mut self, snapshot: &Checkpoint) -> Result<()> {
        *self = Ltm::from_snapshot(snapshot)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> LtmConfig {
        LtmConfig {
            image_size: 20,
            num_classes: 4,
            scae: ScaeConfig {
                num_filters: 6,
                receptive_field: 5,
                stride: 1,
                spatial_k: 1,
                pool_size: 4,
            },
            ..LtmConfig::default()
        }
    }

    fn glyph(seed: u64, side: usize) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let col = rng.random_range(3..side - 3);
        Grid::from_fn(&[side, side], |i| {
            let (y, x) = (i / side, i % side);
            if (x as i64 - col as i64).abs() <= 1 && y > 2 && y < side - 2 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn default_feature_dim_matches_geometry() {
        let cfg = LtmConfig::default();
        assert_eq!(cfg.scae.encoding_side(52), 43);
        assert_eq!(cfg.feature_dim(), 121 * 11 * 11);
        assert_eq!(cfg.feature_dim(), 14_641);
    }

    #[test]
    fn features_need_frozen_scae_and_are_deterministic() {
        let mut ltm = Ltm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = glyph(1, 20);
        assert!(matches!(
            ltm.extract_features(&img),
            Err(Error::NotFrozen(_))
        ));
        ltm.freeze_scae();
        let a = ltm.extract_features(&img).unwrap();
        let b = ltm.extract_features(&img).unwrap();
        assert_eq!(a, b);
        // 16x16 encoding pooled by 4 -> 4x4 per filter
        assert_eq!(a.dim(), 6 * 4 * 4);
        assert_eq!(a.dim(), ltm.feature_dim());
    }

    #[test]
    fn blank_image_has_zero_features() {
        let mut ltm = Ltm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ltm.freeze_scae();
        let f = ltm.extract_features(&Grid::zeros(&[20, 20])).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mut ltm = Ltm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ltm.freeze_scae();
        assert!(ltm.extract_features(&Grid::zeros(&[21, 20])).is_err());
    }

    #[test]
    fn max_pool_keeps_partial_windows() {
        let m = SparseFeatureMap {
            values: Grid::from_fn(&[1, 5, 5], |i| i as f64),
            spatial_k: 1,
        };
        let p = m.max_pool(2);
        assert_eq!(p.shape(), &[1, 3, 3]);
        assert_eq!(
            p.data(),
            &[6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]
        );
    }

    #[test]
    fn snapshot_restore_survives_corrupting_training() {
        let mut ltm = Ltm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        ltm.freeze_scae();
        let img = glyph(4, 20);
        let f = ltm.extract_features(&img).unwrap();
        let snap = ltm.snapshot();
        let before = ltm.classifier_forward(&f).unwrap();
        for i in 0..100 {
            ltm.classifier_train_step(&[(&f, i % 4)], 0.5).unwrap();
        }
        assert_ne!(ltm.classifier_forward(&f).unwrap(), before);
        ltm.restore(&snap).unwrap();
        assert_eq!(ltm.classifier_forward(&f).unwrap(), before);
        assert_eq!(ltm.snapshot(), snap);
    }

    #[test]
    fn snapshot_file_round_trip_reproduces_outputs() {
        let mut ltm = Ltm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        ltm.freeze_scae();
        let img = glyph(6, 20);
        let f = ltm.extract_features(&img).unwrap();
        for i in 0..10 {
            ltm.classifier_train_step(&[(&f, i % 3)], 0.2).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ltm.ckpt");
        ltm.snapshot().save(&path).unwrap();
        let back = Ltm::from_snapshot(&Checkpoint::load(&path).unwrap()).unwrap();
        let a = ltm
            .classifier_forward(&ltm.extract_features(&img).unwrap())
            .unwrap();
        let b = back
            .classifier_forward(&back.extract_features(&img).unwrap())
            .unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn snapshot_version_mismatch_is_error() {
        let ltm = Ltm::new(small_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut snap = ltm.snapshot();
        snap.insert_scalar("version", 7.0);
        assert!(matches!(
            Ltm::from_snapshot(&snap),
            Err(Error::CheckpointVersion { found: 7, .. })
        ));
    }

    #[test]
    fn class_distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert_eq!(ClassDistribution::one_hot(3, 2).argmax(), 2);
        assert!(ClassDistribution::uniform(7).is_valid());
    }
}

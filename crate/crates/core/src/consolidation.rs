//! Offline transfer of short-term memories into the LTM classifier.
//!
//! Random uniform-noise cues are pushed through STM recall, the recollection
//! is fed back once more (big loop), faint results are dropped, and the
//! surviving (image, label) pairs are replayed to the classifier in
//! minibatches that always contain at least one entry AHA labels as novel.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltm::{ClassDistribution, FeatureVector, Ltm};
use crate::stm::Aha;
use crate::tensor::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsolidationConfig {
    pub recall_steps: usize,
    pub faint_threshold: f64,
    /// Feedback passes after the first recall.
    pub big_loop_depth: usize,
    pub replay_steps: usize,
    pub minibatch_size: usize,
    /// `None` reuses the classifier pre-training rate.
    pub learning_rate: Option<f64>,
    /// Train on AHA's full label distribution instead of its argmax.
    pub soft_labels: bool,
    /// Sampling weight of novel-predicted entries relative to the rest.
    pub novel_weight: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            recall_steps: 25,
            faint_threshold: 0.1,
            big_loop_depth: 1,
            replay_steps: 160,
            minibatch_size: 20,
            learning_rate: None,
            soft_labels: false,
            novel_weight: 1.0,
        }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be positive".into()));
        }
        if !(self.novel_weight.is_finite() && self.novel_weight > 0.0) {
            return Err(Error::Config(format!(
                "novel_weight {} must be positive",
                self.novel_weight
            )));
        }
        if let Some(lr) = self.learning_rate {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!(
                    "bad consolidation learning rate {lr}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub image: Grid,
    pub label_dist: ClassDistribution,
    pub predicted_label: usize,
    pub confidence: f64,
    /// LTM features of `image`; valid while the SCAE stays frozen.
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub entries: Vec<ReplayEntry>,
    pub novel_label: usize,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].predicted_label == self.novel_label)
            .collect()
    }
}

/// I.i.d. uniform `[0, 1)` pixels.
pub fn random_cue(rng: &mut impl Rng, side: usize) -> Grid {
    Grid::from_fn(&[side, side], |_| rng.random::<f64>())
}

/// Recall from `image`, then feed the recalled image back `depth` times.
pub fn big_loop(image: &Grid, stm: &Aha, ltm: &Ltm, depth: usize) -> Result<ReplayEntry> {
    let mut rec = stm.recall(image, ltm)?;
    for _ in 0..depth {
        rec = stm.recall(&rec.image, ltm)?;
    }
    let features = ltm.extract_features(&rec.image)?;
    Ok(ReplayEntry {
        predicted_label: rec.label_dist.argmax(),
        confidence: rec.label_dist.confidence(),
        label_dist: rec.label_dist,
        image: rec.image,
        features,
    })
}

/// `steps` random cues through the big loop; entries whose brightest pixel is
/// below the faint threshold are dropped.
pub fn random_recall(
    stm: &Aha,
    ltm: &Ltm,
    config: &ConsolidationConfig,
    novel_label: usize,
    rng: &mut impl Rng,
) -> Result<ReplayBuffer> {
    let side = ltm.config().image_size;
    let mut entries = Vec::new();
    for _ in 0..config.recall_steps {
        let cue = random_cue(rng, side);
        let entry = big_loop(&cue, stm, ltm, config.big_loop_depth)?;
        if entry.image.max() >= config.faint_threshold {
            entries.push(entry);
        }
    }
    if entries.is_empty() {
        return Err(Error::RecallCollapse {
            steps: config.recall_steps,
            threshold: config.faint_threshold,
        });
    }
    Ok(ReplayBuffer {
        entries,
        novel_label,
    })
}

/// Indices into the buffer, sampled with replacement. If no novel-predicted
/// entry was drawn, one random slot is overwritten with one.
pub fn sample_minibatch(
    buffer: &ReplayBuffer,
    size: usize,
    novel_weight: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let novel = buffer.novel_indices();
    if novel.is_empty() {
        return Err(Error::NovelNeverRecalled {
            novel_label: buffer.novel_label,
        });
    }
    if size == 0 {
        return Err(Error::InvalidArgument(
            "minibatch size must be positive".into(),
        ));
    }
    let n = buffer.len();
    let mut batch: Vec<usize> = if novel_weight == 1.0 {
        (0..size).map(|_| rng.random_range(0..n)).collect()
    } else {
        let weights: Vec<f64> = buffer
            .entries
            .iter()
            .map(|e| {
                if e.predicted_label == buffer.novel_label {
                    novel_weight
                } else {
                    1.0
                }
            })
            .collect();
        let dist =
            WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (0..size).map(|_| dist.sample(rng)).collect()
    };
    if !batch
        .iter()
        .any(|&i| buffer.entries[i].predicted_label == buffer.novel_label)
    {
        let slot = rng.random_range(0..size);
        batch[slot] = novel[rng.random_range(0..novel.len())];
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsolidationReport {
    pub losses: Vec<f64>,
    /// Novel-predicted entries in each minibatch.
    pub novel_per_batch: Vec<usize>,
}

/// Replays the buffer to the classifier for `replay_steps` minibatches. The
/// SCAE and the STM are not touched.
pub fn consolidate(
    buffer: &ReplayBuffer,
    ltm: &mut Ltm,
    config: &ConsolidationConfig,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<ConsolidationReport> {
    if !ltm.scae().is_frozen() {
        return Err(Error::NotFrozen("SCAE"));
    }
    let mut report = ConsolidationReport::default();
    for _ in 0..config.replay_steps {
        let idx = sample_minibatch(buffer, config.minibatch_size, config.novel_weight, rng)?;
        report.novel_per_batch.push(
            idx.iter()
                .filter(|&&i| buffer.entries[i].predicted_label == buffer.novel_label)
                .count(),
        );
        let loss = if config.soft_labels {
            let batch: Vec<(&FeatureVector, &[f64])> = idx
                .iter()
                .map(|&i| {
                    (
                        &buffer.entries[i].features,
                        buffer.entries[i].label_dist.probs(),
                    )
                })
                .collect();
            ltm.classifier_mut()
                .train_step_soft(&batch, learning_rate)?
        } else {
            let batch: Vec<(&FeatureVector, usize)> = idx
                .iter()
                .map(|&i| {
                    (
                        &buffer.entries[i].features,
                        buffer.entries[i].predicted_label,
                    )
                })
                .collect();
            ltm.classifier_train_step(&batch, learning_rate)?
        };
        report.losses.push(loss);
    }
    Ok(report)
}

/// Writes `buffer.png` (entries tiled in rows of 5) and `buffer.csv`.
pub fn dump_buffer(buffer: &ReplayBuffer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_path(dir.join("buffer.csv"))?;
    csv.write_record([
        "index",
        "predicted_label",
        "confidence",
        "is_novel",
        "max_pixel",
    ])?;
    for (i, e) in buffer.entries.iter().enumerate() {
        csv.write_record([
            i.to_string(),
            e.predicted_label.to_string(),
            format!("{:.6}", e.confidence),
            (e.predicted_label == buffer.novel_label).to_string(),
            format!("{:.6}", e.image.max()),
        ])?;
    }
    csv.flush()?;
    if buffer.is_empty() {
        return Ok(());
    }
    let side = buffer.entries[0].image.shape()[0];
    let cols = 5.min(buffer.len());
    let rows = buffer.len().div_ceil(cols);
    let (w, h) = ((cols * (side + 1)) as u32, (rows * (side + 1)) as u32);
    let mut img = image::GrayImage::new(w, h);
    for (k, e) in buffer.entries.iter().enumerate() {
        let (ox, oy) = ((k % cols) * (side + 1), (k / cols) * (side + 1));
        for r in 0..side {
            for c in 0..side {
                let v = (e.image.at2(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((ox + c) as u32, (oy + r) as u32, image::Luma([v]));
            }
        }
    }
    img.save(dir.join("buffer.png"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(label: usize) -> ReplayEntry {
        ReplayEntry {
            image: Grid::filled(&[4, 4], 0.5),
            label_dist: ClassDistribution::one_hot(3, label),
            predicted_label: label,
            confidence: 1.0,
            features: FeatureVector::new(vec![1.0, 0.0]),
        }
    }

    #[test]
    fn cue_statistics() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let c1 = random_cue(&mut a, 100);
        assert_eq!(c1, random_cue(&mut b, 100));
        assert_ne!(c1, random_cue(&mut a, 100));
        assert!((0.48..=0.52).contains(&c1.mean()));
        assert!(c1.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn single_novel_entry_always_present() {
        let mut entries: Vec<_> = (0..30).map(|i| entry(i % 2)).collect();
        entries.push(entry(2));
        let buf = ReplayBuffer {
            entries,
            novel_label: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let b = sample_minibatch(&buf, 20, 1.0, &mut rng).unwrap();
            assert_eq!(b.len(), 20);
            assert!(b.contains(&30));
        }
    }

    #[test]
    fn all_novel_buffer_and_missing_novel() {
        let buf = ReplayBuffer {
            entries: vec![entry(2); 3],
            novel_label: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_minibatch(&buf, 5, 1.0, &mut rng).unwrap().len(), 5);
        let buf = ReplayBuffer {
            entries: vec![entry(0); 3],
            novel_label: 2,
        };
        assert!(matches!(
            sample_minibatch(&buf, 5, 1.0, &mut rng),
            Err(Error::NovelNeverRecalled { novel_label: 2 })
        ));
    }

    #[test]
    fn novel_weight_biases_sampling() {
        let mut entries: Vec<_> = (0..9).map(|_| entry(0)).collect();
        entries.push(entry(1));
        let buf = ReplayBuffer {
            entries,
            novel_label: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let count = |w: f64, rng: &mut ChaCha8Rng| -> usize {
            (0..200)
                .map(|_| {
                    sample_minibatch(&buf, 10, w, rng)
                        .unwrap()
                        .iter()
                        .filter(|&&i| i == 9)
                        .count()
                })
                .sum()
        };
        assert!(count(9.0, &mut rng) > 2 * count(1.0, &mut rng));
    }

    #[test]
    fn dump_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let buf = ReplayBuffer {
            entries: vec![entry(0), entry(2)],
            novel_label: 2,
        };
        dump_buffer(&buf, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("buffer.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("buffer.png").exists());
    }
}

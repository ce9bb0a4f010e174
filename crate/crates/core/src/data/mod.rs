//! Dataset ingestion, class splits and per-run support/target sampling.

mod synth;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{synth_glyphs, SynthParams};

use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Grid;

/// Which half of the corpus a class came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Portion {
    Background,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[size, size]`, ink near 1 on background near 0.
    pub image: Grid,
    pub class_id: usize,
    pub exemplar_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub name: String,
    pub portion: Portion,
    pub samples: Vec<LabeledSample>,
}

/// Class-indexed sample collection; `class_id` is the index into `classes`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub classes: Vec<ClassRecord>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self, portion: Portion) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.portion == portion)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sample(&self, class_id: usize, exemplar: usize) -> &LabeledSample {
        &self.classes[class_id].samples[exemplar]
    }

    /// Appends `other`, renumbering its class ids.
    pub fn extend(&mut self, other: Dataset) {
        let offset = self.classes.len();
        for mut c in other.classes {
            for s in &mut c.samples {
                s.class_id += offset;
            }
            self.classes.push(c);
        }
    }

    /// Synthetic stand-in for the Omniglot background/evaluation corpus.
    pub fn synthetic(
        seed: u64,
        background_classes: usize,
        evaluation_classes: usize,
        exemplars_per_class: usize,
        params: &SynthParams,
    ) -> Dataset {
        let mut d = synth_glyphs(
            derive_seed(seed, "synth/background", 0),
            background_classes,
            exemplars_per_class,
            params,
            Portion::Background,
        );
        d.extend(synth_glyphs(
            derive_seed(seed, "synth/evaluation", 0),
            evaluation_classes,
            exemplars_per_class,
            params,
            Portion::Evaluation,
        ));
        d
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png")
    )
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(p)
        .map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// Loads one grayscale character image: inverted so strokes are bright,
/// resized with a triangle (anti-aliasing) filter, values in `[0, 1]`.
pub fn load_character_image(path: &Path, size: usize) -> Result<Grid> {
    let img = image::open(path)?.to_luma32f();
    let inverted: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
            Luma([1.0 - img.get_pixel(x, y).0[0].clamp(0.0, 1.0)])
        });
    let resized =
        image::imageops::resize(&inverted, size as u32, size as u32, FilterType::Triangle);
    Grid::new(
        vec![size, size],
        resized
            .pixels()
            .map(|p| (p.0[0] as f64).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Reads an `alphabet/character/image` tree. Class ids follow sorted path
/// order; exemplars are sorted by file name.
pub fn load_dataset(root: &Path, portion: Portion, size: usize) -> Result<Dataset> {
    let mut classes = Vec::new();
    let mut failures = Vec::new();
    for alphabet in sorted_dirs(root)? {
        for character in sorted_dirs(&alphabet)? {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&character)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_image_file(p))
                .collect();
            files.sort();
            let class_id = classes.len();
            let mut samples = Vec::with_capacity(files.len());
            for (exemplar_id, f) in files.iter().enumerate() {
                match load_character_image(f, size) {
                    Ok(image) => samples.push(LabeledSample {
                        image,
                        class_id,
                        exemplar_id,
                    }),
                    Err(e) => failures.push(format!("{}: {e}", f.display())),
                }
            }
            if files.is_empty() {
                failures.push(format!("{}: no images", character.display()));
            }
            let name = character
                .strip_prefix(root)
                .unwrap_or(&character)
                .to_string_lossy()
                .into_owned();
            classes.push(ClassRecord {
                name,
                portion,
                samples,
            });
        }
    }
    if !failures.is_empty() {
        return Err(Error::Dataset(format!(
            "failed to load {} file(s):\n{}",
            failures.len(),
            failures.join("\n")
        )));
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "no character directories under {}",
            root.display()
        )));
    }
    Ok(Dataset { classes })
}

/// Loads `images_background` and `images_evaluation` under `root`.
pub fn load_omniglot(root: &Path, size: usize) -> Result<Dataset> {
    let mut d = load_dataset(&root.join("images_background"), Portion::Background, size)?;
    d.extend(load_dataset(
        &root.join("images_evaluation"),
        Portion::Evaluation,
        size,
    )?);
    Ok(d)
}

/// Disjoint class sets for autoencoder pre-training, classifier training and
/// one-shot novelty, plus the exemplar partition of each evaluation class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    pub eval_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// Per evaluation class: exemplars reserved for support/target sampling.
    pub eval_pool: Vec<Vec<usize>>,
    /// Per evaluation class: exemplars used to pre-train the classifier.
    pub eval_train: Vec<Vec<usize>>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<usize> = self
            .base_classes
            .iter()
            .chain(&self.eval_classes)
            .chain(&self.novel_classes)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::Dataset("class splits overlap".into()));
        }
        if self.eval_pool.len() != self.eval_classes.len()
            || self.eval_train.len() != self.eval_classes.len()
        {
            return Err(Error::Dataset(
                "exemplar partition does not match evaluation classes".into(),
            ));
        }
        for (pool, train) in self.eval_pool.iter().zip(&self.eval_train) {
            if pool.iter().any(|e| train.contains(e)) {
                return Err(Error::Dataset(
                    "reserved exemplars leak into classifier training".into(),
                ));
            }
        }
        Ok(())
    }

    /// Vocabulary label of a class within a run: evaluation classes take
    /// `0..eval`, the run's novel class takes the last slot.
    pub fn novel_label(&self) -> usize {
        self.eval_classes.len()
    }

    pub fn num_labels(&self) -> usize {
        self.eval_classes.len() + 1
    }
}

/// Base = every background class; evaluation and novel classes are drawn
/// without replacement from the evaluation portion.
pub fn make_splits(
    dataset: &Dataset,
    seed: u64,
    n_eval: usize,
    n_novel: usize,
    reserved_exemplars: usize,
) -> Result<SplitSpec> {
    let base_classes = dataset.class_ids(Portion::Background);
    let mut pool = dataset.class_ids(Portion::Evaluation);
    if pool.len() < n_eval + n_novel {
        return Err(Error::Dataset(format!(
            "need {} evaluation-portion classes, found {}",
            n_eval + n_novel,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "splits", 0));
    pool.shuffle(&mut rng);
    let eval_classes: Vec<usize> = pool[..n_eval].to_vec();
    let novel_classes: Vec<usize> = pool[n_eval..n_eval + n_novel].to_vec();
    let mut eval_pool = Vec::new();
    let mut eval_train = Vec::new();
    for &c in &eval_classes {
        let n = dataset.classes[c].samples.len();
        if n < reserved_exemplars + 1 || reserved_exemplars < 2 {
            return Err(Error::Dataset(format!(
                "class {} has {n} exemplars; need {} reserved plus training data",
                dataset.classes[c].name, reserved_exemplars
            )));
        }
        let mut ex: Vec<usize> = (0..n).collect();
        ex.shuffle(&mut rng);
        let mut reserved = ex[..reserved_exemplars].to_vec();
        let mut train = ex[reserved_exemplars..].to_vec();
        reserved.sort_unstable();
        train.sort_unstable();
        eval_pool.push(reserved);
        eval_train.push(train);
    }
    let spec = SplitSpec {
        base_classes,
        eval_classes,
        novel_classes,
        eval_pool,
        eval_train,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// One support/target episode. `support[i]` and `target[i]` carry label `i`;
/// the last label is the novel class.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub run_index: usize,
    pub novel_class: usize,
    /// Global class id for each label.
    pub classes: Vec<usize>,
    pub support: Vec<LabeledSample>,
    pub target: Vec<LabeledSample>,
}

impl RunSpec {
    pub fn novel_label(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.len() != self.classes.len() || self.target.len() != self.classes.len() {
            return Err(Error::Dataset("support/target size mismatch".into()));
        }
        for ((s, t), &c) in self.support.iter().zip(&self.target).zip(&self.classes) {
            if s.class_id != c || t.class_id != c || s.exemplar_id == t.exemplar_id {
                return Err(Error::Dataset(format!(
                    "run {} composition invalid for class {c}",
                    self.run_index
                )));
            }
        }
        Ok(())
    }
}

fn two_distinct(
    candidates: &[usize],
    rng: &mut ChaCha8Rng,
    class_name: &str,
) -> Result<(usize, usize)> {
    if candidates.len() < 2 {
        return Err(Error::Dataset(format!(
            "class {class_name} has fewer than 2 exemplars available"
        )));
    }
    let picked: Vec<usize> = candidates.choose_multiple(rng, 2).copied().collect();
    Ok((picked[0], picked[1]))
}

/// Draws one support and one distinct target exemplar per class. The novel
/// class is `novel_classes[run_index]`.
pub fn sample_run(
    dataset: &Dataset,
    splits: &SplitSpec,
    run_index: usize,
    seed: u64,
) -> Result<RunSpec> {
    let novel_class = *splits.novel_classes.get(run_index).ok_or_else(|| {
        Error::Dataset(format!(
            "run {run_index} needs a novel class; only {} available",
            splits.novel_classes.len()
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "run_sampling", run_index as u64));
    let mut support = Vec::new();
    let mut target = Vec::new();
    let mut classes = Vec::new();
    for (i, &c) in splits.eval_classes.iter().enumerate() {
        let (s, t) = two_distinct(&splits.eval_pool[i], &mut rng, &dataset.classes[c].name)?;
        support.push(dataset.sample(c, s).clone());
        target.push(dataset.sample(c, t).clone());
        classes.push(c);
    }
    let all: Vec<usize> = (0..dataset.classes[novel_class].samples.len()).collect();
    let (s, t) = two_distinct(&all, &mut rng, &dataset.classes[novel_class].name)?;
    support.push(dataset.sample(novel_class, s).clone());
    target.push(dataset.sample(novel_class, t).clone());
    classes.push(novel_class);
    let run = RunSpec {
        run_index,
        novel_class,
        classes,
        support,
        target,
    };
    run.validate()?;
    Ok(run)
}

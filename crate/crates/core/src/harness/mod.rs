//! Experiment orchestration: pre-training, per-run evaluation, aggregation
//! and reporting.
//!
//! Per run: restore the pre-trained LTM, reset the STM, study the support set,
//! test short-term inference and the LTM alone on the target set, run random
//! recall and consolidation, then test the consolidated LTM.

mod config;
mod gradcheck;
mod report;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    DataConfig, ExperimentConfig, PretrainConfig, SyntheticConfig, DEFAULT_CONFIG_TOML,
};
pub use gradcheck::{gradient_suite, GRADCHECK_EPSILON};
pub use report::{
    read_results, render_table, summarize, write_manifest, write_report, MetricSummary, Summary,
};

use crate::consolidation::{consolidate, random_recall};
use crate::data::{load_omniglot, make_splits, sample_run, Dataset, RunSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::inference::short_term_infer_features;
use crate::ltm::{FeatureVector, Ltm};
use crate::seeds::{derive_seed, stream};
use crate::stm::Aha;
use crate::tensor::{mean_squared_difference, Grid};

/// Where the corpus comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Procedural glyphs per `data.synthetic`.
    Synthetic,
    /// An Omniglot-layout root holding `images_background` and
    /// `images_evaluation`.
    Directory(PathBuf),
}

impl DataSource {
    /// `"synthetic"` or a directory path.
    pub fn parse(arg: &str) -> Self {
        if arg == "synthetic" {
            DataSource::Synthetic
        } else {
            DataSource::Directory(PathBuf::from(arg))
        }
    }
}

pub fn load_data(config: &ExperimentConfig, source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic => {
            let s = &config.data.synthetic;
            Ok(Dataset::synthetic(
                s.seed,
                s.background_classes,
                s.evaluation_classes,
                s.exemplars_per_class,
                &s.glyphs,
            ))
        }
        DataSource::Directory(root) => load_omniglot(root, config.ltm.image_size),
    }
}

pub fn splits_for(config: &ExperimentConfig, dataset: &Dataset) -> Result<SplitSpec> {
    make_splits(
        dataset,
        config.data.split_seed,
        config.data.eval_classes,
        config.data.novel_classes,
        config.data.reserved_exemplars,
    )
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub scae_losses: Vec<f64>,
    pub heldout_mse: f64,
    /// MSE of predicting an all-zero image on the same held-out images.
    pub zero_baseline_mse: f64,
    pub classifier_losses: Vec<f64>,
    /// Accuracy on the reserved exemplars of the evaluation classes.
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub ltm: Ltm,
    pub report: PretrainReport,
}

/// Trains the SCAE on base classes until the loss plateaus, freezes it, then
/// trains the classifier on the evaluation classes with the novel slot held
/// fixed.
pub fn pretrain(
    config: &ExperimentConfig,
    dataset: &Dataset,
    splits: &SplitSpec,
    seed: u64,
) -> Result<Pretrained> {
    config.validate()?;
    let p = &config.pretrain;
    let mut ltm = Ltm::new(
        config.ltm.clone(),
        &mut stream(seed, "pretrain/ltm_init", 0),
    )?;
    let mut report = PretrainReport::default();

    let mut base: Vec<&Grid> = splits
        .base_classes
        .iter()
        .flat_map(|&c| dataset.classes[c].samples.iter().map(|s| &s.image))
        .collect();
    if base.is_empty() {
        return Err(Error::Dataset(
            "no base-class images for autoencoder training".into(),
        ));
    }
    base.shuffle(&mut stream(seed, "pretrain/scae_holdout", 0));
    let n_hold =
        ((base.len() as f64 * p.scae_holdout_fraction).ceil() as usize).min(base.len() - 1);
    let (held, train) = base.split_at(n_hold);

    let mut rng = stream(seed, "pretrain/scae_batches", 0);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..p.scae_max_steps {
        let mut batch = Vec::with_capacity(p.scae_batch_size);
        while batch.len() < p.scae_batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(train[order.pop().expect("refilled")].clone());
        }
        let (loss, _) = ltm.scae_mut().train_step(&batch, p.scae_learning_rate)?;
        report.scae_losses.push(loss);
        let w = p.scae_plateau_window;
        if (step + 1) % w == 0 && step + 1 >= 2 * w {
            let l = &report.scae_losses;
            let cur = l[l.len() - w..].iter().sum::<f64>() / w as f64;
            let prev = l[l.len() - 2 * w..l.len() - w].iter().sum::<f64>() / w as f64;
            if prev - cur < p.scae_plateau_tolerance * prev {
                break;
            }
        }
    }
    ltm.freeze_scae();
    if !held.is_empty() {
        let (mut mse, mut zero) = (0.0, 0.0);
        for img in held {
            mse += mean_squared_difference(&ltm.scae().reconstruct(img)?, img)?;
            zero += img.data().iter().map(|v| v * v).sum::<f64>() / img.len() as f64;
        }
        report.heldout_mse = mse / held.len() as f64;
        report.zero_baseline_mse = zero / held.len() as f64;
    }

    let novel_label = splits.novel_label();
    let mut train_set: Vec<(FeatureVector, usize)> = Vec::new();
    for (label, &c) in splits.eval_classes.iter().enumerate() {
        for &e in &splits.eval_train[label] {
            train_set.push((ltm.extract_features(&dataset.sample(c, e).image)?, label));
        }
    }
    ltm.classifier_mut().set_trainable(novel_label, false);
    let mut rng = stream(seed, "pretrain/classifier_batches", 0);
    train_classifier(
        &mut ltm,
        &train_set,
        p.classifier_epochs,
        p.classifier_batch_size,
        p.classifier_learning_rate,
        &mut rng,
        &mut report.classifier_losses,
    )?;
    ltm.classifier_mut().set_all_trainable();

    let (mut correct, mut total) = (0, 0);
    for (label, &c) in splits.eval_classes.iter().enumerate() {
        for &e in &splits.eval_pool[label] {
            let f = ltm.extract_features(&dataset.sample(c, e).image)?;
            correct += usize::from(ltm.classifier_forward(&f)?.argmax() == label);
            total += 1;
        }
    }
    report.heldout_accuracy = correct as f64 / total.max(1) as f64;
    Ok(Pretrained { ltm, report })
}

fn train_classifier(
    ltm: &mut Ltm,
    data: &[(FeatureVector, usize)],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
    losses: &mut Vec<f64>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&FeatureVector, usize)> =
                chunk.iter().map(|&i| (&data[i].0, data[i].1)).collect();
            losses.push(ltm.classifier_train_step(&batch, learning_rate)?);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Every recalled image was below the faint threshold.
    RecallCollapse,
    /// No replayed entry was labelled as the novel class.
    NovelNeverRecalled,
}

/// Accuracies are fractions of the 20 targets (`*_all`) or of the single
/// novel target (`*_oneshot`, so 0 or 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub run_index: usize,
    pub novel_class: usize,
    pub upper_all: f64,
    pub upper_oneshot: f64,
    pub ltm_all: f64,
    pub ltm_oneshot: f64,
    pub sti_all: f64,
    pub sti_oneshot: f64,
    pub lti_all: f64,
    pub lti_oneshot: f64,
    pub buffer_size: usize,
    pub buffer_novel: usize,
    pub status: RunStatus,
}

/// Dataset, splits and cached LTM features of every evaluation and novel
/// exemplar. Features depend only on the frozen SCAE, which no run changes.
pub struct EvalContext<'a> {
    pub dataset: &'a Dataset,
    pub splits: SplitSpec,
    features: HashMap<(usize, usize), FeatureVector>,
}

impl<'a> EvalContext<'a> {
    pub fn new(config: &ExperimentConfig, dataset: &'a Dataset, ltm: &Ltm) -> Result<Self> {
        let splits = splits_for(config, dataset)?;
        let mut features = HashMap::new();
        let novel_used = &splits.novel_classes[..config.runs.min(splits.novel_classes.len())];
        for &c in splits.eval_classes.iter().chain(novel_used) {
            for (e, s) in dataset.classes[c].samples.iter().enumerate() {
                features.insert((c, e), ltm.extract_features(&s.image)?);
            }
        }
        Ok(EvalContext {
            dataset,
            splits,
            features,
        })
    }

    pub fn features(&self, class: usize, exemplar: usize) -> Result<&FeatureVector> {
        self.features.get(&(class, exemplar)).ok_or_else(|| {
            Error::Dataset(format!(
                "no cached features for class {class} exemplar {exemplar}"
            ))
        })
    }
}

fn accuracy(ltm: &Ltm, targets: &[&FeatureVector]) -> Result<Vec<bool>> {
    targets
        .iter()
        .enumerate()
        .map(|(label, f)| Ok(ltm.classifier_forward(f)?.argmax() == label))
        .collect()
}

fn fractions(hits: &[bool], novel_label: usize) -> (f64, f64) {
    let all = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    (all, if hits[novel_label] { 1.0 } else { 0.0 })
}

/// One run. `ltm` enters as the restored pre-trained model and leaves
/// consolidated; `aha` is reset here.
pub fn evaluate_run(
    config: &ExperimentConfig,
    ctx: &EvalContext,
    ltm: &mut Ltm,
    aha: &mut Aha,
    run: &RunSpec,
    seed: u64,
) -> Result<RunResult> {
    run.validate()?;
    let novel = run.novel_label();
    let ri = run.run_index as u64;
    let support: Vec<&FeatureVector> = run
        .support
        .iter()
        .map(|s| ctx.features(s.class_id, s.exemplar_id))
        .collect::<Result<_>>()?;
    let targets: Vec<&FeatureVector> = run
        .target
        .iter()
        .map(|s| ctx.features(s.class_id, s.exemplar_id))
        .collect::<Result<_>>()?;

    // No-one-shot upper bound: full training data for all 20 classes.
    let upper = {
        let mut m = ltm.clone();
        m.classifier_mut().set_all_trainable();
        let mut data: Vec<(FeatureVector, usize)> = Vec::new();
        for (label, &c) in ctx.splits.eval_classes.iter().enumerate() {
            for &e in &ctx.splits.eval_train[label] {
                data.push((ctx.features(c, e)?.clone(), label));
            }
        }
        let target_ex = run.target[novel].exemplar_id;
        for e in 0..ctx.dataset.classes[run.novel_class].samples.len() {
            if e != target_ex {
                data.push((ctx.features(run.novel_class, e)?.clone(), novel));
            }
        }
        let p = &config.pretrain;
        let mut rng = stream(seed, "upper_bound/batches", ri);
        train_classifier(
            &mut m,
            &data,
            p.upper_bound_epochs,
            p.classifier_batch_size,
            p.classifier_learning_rate,
            &mut rng,
            &mut Vec::new(),
        )?;
        fractions(&accuracy(&m, &targets)?, novel)
    };

    aha.reseed(derive_seed(seed, "stm/nets", ri));
    let samples: Vec<(&Grid, usize)> = run
        .support
        .iter()
        .enumerate()
        .map(|(l, s)| (&s.image, l))
        .collect();
    let owned: Vec<FeatureVector> = support.iter().map(|f| (*f).clone()).collect();
    aha.study_features(&samples, &owned, derive_seed(seed, "stm/study_order", ri))?;

    ltm.classifier_mut().set_all_trainable();
    if config.pretrain.ltm_support_steps > 0 {
        let batch: Vec<(&FeatureVector, usize)> =
            support.iter().enumerate().map(|(l, f)| (*f, l)).collect();
        for _ in 0..config.pretrain.ltm_support_steps {
            ltm.classifier_train_step(&batch, config.pretrain.classifier_learning_rate)?;
        }
    }

    let mut sti_hits = Vec::with_capacity(targets.len());
    for (label, f) in targets.iter().enumerate() {
        sti_hits
            .push(short_term_infer_features(f, ltm, aha, &config.interpolation)?.argmax() == label);
    }
    let sti = fractions(&sti_hits, novel);
    let baseline = fractions(&accuracy(ltm, &targets)?, novel);

    let mut cue_rng = stream(seed, "consolidation/cues", ri);
    let mut replay_rng = stream(seed, "consolidation/replay", ri);
    let lr = config.consolidation_learning_rate();
    let (status, buffer_size, buffer_novel) =
        match random_recall(aha, ltm, &config.consolidation, novel, &mut cue_rng) {
            Ok(buffer) => {
                let n = (buffer.len(), buffer.novel_indices().len());
                match consolidate(&buffer, ltm, &config.consolidation, lr, &mut replay_rng) {
                    Ok(_) => (RunStatus::Ok, n.0, n.1),
                    Err(Error::NovelNeverRecalled { .. }) => {
                        (RunStatus::NovelNeverRecalled, n.0, n.1)
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::RecallCollapse { .. }) => (RunStatus::RecallCollapse, 0, 0),
            Err(e) => return Err(e),
        };
    let lti = fractions(&accuracy(ltm, &targets)?, novel);

    Ok(RunResult {
        seed,
        run_index: run.run_index,
        novel_class: run.novel_class,
        upper_all: upper.0,
        upper_oneshot: upper.1,
        ltm_all: baseline.0,
        ltm_oneshot: baseline.1,
        sti_all: sti.0,
        sti_oneshot: sti.1,
        lti_all: lti.0,
        lti_oneshot: lti.1,
        buffer_size,
        buffer_novel,
        status,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<RunResult>,
    pub summary: Summary,
}

/// All runs for all configured seeds, in (seed, run) order.
pub fn evaluate(
    config: &ExperimentConfig,
    dataset: &Dataset,
    pretrained: &Ltm,
) -> Result<Evaluation> {
    evaluate_with(config, dataset, pretrained, |_| {})
}

/// [`evaluate`] with a callback after each run.
pub fn evaluate_with(
    config: &ExperimentConfig,
    dataset: &Dataset,
    pretrained: &Ltm,
    mut on_run: impl FnMut(&RunResult),
) -> Result<Evaluation> {
    config.validate()?;
    if !pretrained.scae().is_frozen() {
        return Err(Error::NotFrozen("SCAE"));
    }
    let ctx = EvalContext::new(config, dataset, pretrained)?;
    let mut results = Vec::with_capacity(config.runs * config.seeds.len());
    for &seed in &config.seeds {
        let mut aha = Aha::new(
            config.stm.clone(),
            pretrained.feature_dim(),
            config.ltm.image_size,
            config.ltm.num_classes,
            derive_seed(seed, "stm/ps", 0),
            derive_seed(seed, "stm/nets", 0),
        )?;
        let projection = aha.separator().projection_fingerprint();
        let mut carried = pretrained.clone();
        for r in 0..config.runs {
            let run = sample_run(dataset, &ctx.splits, r, seed)?;
            let mut ltm = if config.accumulate_across_runs {
                carried.clone()
            } else {
                pretrained.clone()
            };
            let result = evaluate_run(config, &ctx, &mut ltm, &mut aha, &run, seed)?;
            if aha.separator().projection_fingerprint() != projection {
                return Err(Error::InvalidArgument(
                    "pattern separator projection changed during a run".into(),
                ));
            }
            on_run(&result);
            results.push(result);
            if config.accumulate_across_runs {
                carried = ltm;
            }
        }
    }
    let summary = summarize(&results);
    Ok(Evaluation { results, summary })
}

/// Seed streams used by an evaluation, for the manifest.
pub fn stream_manifest(config: &ExperimentConfig) -> Vec<(u64, String, u64, u64)> {
    let mut rows = vec![(
        config.data.split_seed,
        "splits".to_string(),
        0,
        derive_seed(config.data.split_seed, "splits", 0),
    )];
    for &seed in &config.seeds {
        rows.push((
            seed,
            "stm/ps".to_string(),
            0,
            derive_seed(seed, "stm/ps", 0),
        ));
        for r in 0..config.runs as u64 {
            for name in [
                "run_sampling",
                "stm/nets",
                "stm/study_order",
                "upper_bound/batches",
                "consolidation/cues",
                "consolidation/replay",
            ] {
                rows.push((seed, name.to_string(), r, derive_seed(seed, name, r)));
            }
        }
    }
    rows
}

/// Pre-trains, saves the LTM checkpoint under `out`, and returns it.
pub fn pretrain_to(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<Pretrained> {
    let splits = splits_for(config, dataset)?;
    let pre = pretrain(config, dataset, &splits, seed)?;
    std::fs::create_dir_all(out)?;
    pre.ltm.snapshot().save(&out.join("ltm.ckpt"))?;
    Ok(pre)
}

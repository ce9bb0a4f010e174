//! Short-term memory: a one-shot hippocampal store of (image, label) pairs.
//!
//! Data flow during study: LTM features -> PS (separation) -> PC (store); PR
//! learns features -> stored pattern, PM-image and PM-label learn pattern ->
//! image and label. During recall: features -> PR -> PC -> PM heads.

mod hopfield;
mod pattern;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hopfield::{HopfieldStore, RecallOutcome, RecallRule, StorageRule};
pub use pattern::{BipolarPattern, PatternSeparator};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ltm::{ClassDistribution, FeatureVector, Ltm};
use crate::seeds::stream;
use crate::tensor::{
    mse_loss, sigmoid, sigmoid_bce_with_logits, softmax, softmax_cross_entropy, Grid, LayerParams,
    TwoLayerNet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StmConfig {
    pub pattern_size: usize,
    pub ps_k: usize,
    pub inhibition_decay: f64,
    pub pr_hidden: usize,
    pub pm_hidden: usize,
    pub study_epochs: usize,
    pub hopfield_max_iters: usize,
    pub capacity: usize,
    pub storage_rule: StorageRule,
    /// `None` selects `KWinners(ps_k)`.
    pub recall_rule: Option<RecallRule>,
    /// PR and PM-image rates scale the per-unit gradient: the mean loss is
    /// reported, the summed loss is stepped.
    pub pr_learning_rate: f64,
    pub pm_image_learning_rate: f64,
    pub pm_label_learning_rate: f64,
    pub leak: f64,
    /// Scale LTM features to unit L2 norm before PS and PR.
    pub normalize_features: bool,
}

impl Default for StmConfig {
    fn default() -> Self {
        StmConfig {
            pattern_size: 225,
            ps_k: 10,
            inhibition_decay: 0.95,
            pr_hidden: 100,
            pm_hidden: 100,
            study_epochs: 60,
            hopfield_max_iters: 50,
            capacity: 20,
            storage_rule: StorageRule::Covariance,
            recall_rule: None,
            pr_learning_rate: 0.05,
            pm_image_learning_rate: 0.01,
            pm_label_learning_rate: 0.05,
            leak: 0.01,
            normalize_features: true,
        }
    }
}

impl StmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ps_k == 0 || self.ps_k > self.pattern_size {
            return Err(Error::Config(format!(
                "ps_k {} outside 1..={}",
                self.ps_k, self.pattern_size
            )));
        }
        if self.hopfield_max_iters == 0
            || self.capacity == 0
            || self.pr_hidden == 0
            || self.pm_hidden == 0
        {
            return Err(Error::Config(
                "STM sizes and iteration counts must be positive".into(),
            ));
        }
        for lr in [
            self.pr_learning_rate,
            self.pm_image_learning_rate,
            self.pm_label_learning_rate,
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("bad STM learning rate {lr}")));
            }
        }
        if let Some(RecallRule::KWinners(k)) = self.recall_rule {
            if k == 0 || k > self.pattern_size {
                return Err(Error::Config(format!(
                    "k-winners {k} outside 1..={}",
                    self.pattern_size
                )));
            }
        }
        Ok(())
    }

    pub fn rule(&self) -> RecallRule {
        self.recall_rule.unwrap_or(RecallRule::KWinners(self.ps_k))
    }
}

/// Output of one recall.
#[derive(Debug, Clone, PartialEq)]
pub struct Recollection {
    pub image: Grid,
    pub label_dist: ClassDistribution,
    pub pattern: BipolarPattern,
}

/// The study-time record kept alongside the store, for inspection only.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub pattern: BipolarPattern,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aha {
    config: StmConfig,
    feature_dim: usize,
    image_size: usize,
    num_classes: usize,
    ps: PatternSeparator,
    pc: HopfieldStore,
    pr: TwoLayerNet,
    pm_image: TwoLayerNet,
    pm_label: TwoLayerNet,
    net_seed: u64,
    studied: Vec<StudyRecord>,
}

fn fresh_nets(
    config: &StmConfig,
    feature_dim: usize,
    pixels: usize,
    classes: usize,
    seed: u64,
) -> [TwoLayerNet; 3] {
    let mut rng = stream(seed, "stm/nets", 0);
    [
        TwoLayerNet::new(
            feature_dim,
            config.pr_hidden,
            config.pattern_size,
            config.leak,
            &mut rng,
        ),
        TwoLayerNet::new(
            config.pattern_size,
            config.pm_hidden,
            pixels,
            config.leak,
            &mut rng,
        ),
        TwoLayerNet::new(
            config.pattern_size,
            config.pm_hidden,
            classes,
            config.leak,
            &mut rng,
        ),
    ]
}

impl Aha {
    /// `ps_seed` draws the fixed projection; `net_seed` the PR/PM initial
    /// weights used by every [`Aha::reset`].
    pub fn new(
        config: StmConfig,
        feature_dim: usize,
        image_size: usize,
        num_classes: usize,
        ps_seed: u64,
        net_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let ps = PatternSeparator::new(
            config.pattern_size,
            feature_dim,
            config.ps_k,
            config.inhibition_decay,
            &mut stream(ps_seed, "stm/ps", 0),
        )?;
        let [pr, pm_image, pm_label] = fresh_nets(
            &config,
            feature_dim,
            image_size * image_size,
            num_classes,
            net_seed,
        );
        Ok(Aha {
            pc: HopfieldStore::with_storage(
                config.pattern_size,
                config.capacity,
                config.storage_rule,
            ),
            config,
            feature_dim,
            image_size,
            num_classes,
            ps,
            pr,
            pm_image,
            pm_label,
            net_seed,
            studied: Vec::new(),
        })
    }

    pub fn config(&self) -> &StmConfig {
        &self.config
    }

    pub fn separator(&self) -> &PatternSeparator {
        &self.ps
    }

    pub fn store(&self) -> &HopfieldStore {
        &self.pc
    }

    pub fn studied(&self) -> &[StudyRecord] {
        &self.studied
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pr(&self) -> &TwoLayerNet {
        &self.pr
    }

    pub fn pm_image(&self) -> &TwoLayerNet {
        &self.pm_image
    }

    pub fn pm_label(&self) -> &TwoLayerNet {
        &self.pm_label
    }

    /// Clears the store and inhibition and re-initialises PR/PM from the net
    /// seed. The PS projection is kept.
    pub fn reset(&mut self) {
        self.pc.clear();
        self.ps.clear_inhibition();
        let [pr, pm_image, pm_label] = fresh_nets(
            &self.config,
            self.feature_dim,
            self.image_size * self.image_size,
            self.num_classes,
            self.net_seed,
        );
        self.pr = pr;
        self.pm_image = pm_image;
        self.pm_label = pm_label;
        self.studied.clear();
    }

    /// Changes the seed for subsequent resets and resets.
    pub fn reseed(&mut self, net_seed: u64) {
        self.net_seed = net_seed;
        self.reset();
    }

    fn prepare(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        if features.dim() != self.feature_dim {
            return Err(Error::shape(
                "STM features",
                &[features.dim()],
                &[self.feature_dim],
            ));
        }
        let mut x = features.values().to_vec();
        if self.config.normalize_features {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                x.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(x)
    }

    pub fn ps_separate(&mut self, features: &FeatureVector) -> Result<BipolarPattern> {
        let x = self.prepare(features)?;
        self.ps.separate(&x)
    }

    pub fn pc_store(&mut self, pattern: &BipolarPattern) -> Result<()> {
        self.pc.store(pattern)
    }

    pub fn pc_recall(&self, cue: &BipolarPattern) -> Result<RecallOutcome> {
        self.pc
            .recall(cue, self.config.hopfield_max_iters, self.config.rule())
    }

    fn pr_loss(logits: &[f64], target: &BipolarPattern) -> Result<(f64, Vec<f64>)> {
        sigmoid_bce_with_logits(logits, &target.to_unit())
    }

    pub fn pr_train_step(
        &mut self,
        features: &FeatureVector,
        target: &BipolarPattern,
    ) -> Result<f64> {
        let x = self.prepare(features)?;
        let lr = self.config.pr_learning_rate * self.config.pattern_size as f64;
        self.pr.train_step(&x, lr, |out| Self::pr_loss(out, target))
    }

    /// Per-unit values in (0, 1).
    pub fn pr_activations(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        let x = self.prepare(features)?;
        Ok(self
            .pr
            .forward(&x)?
            .output
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    pub fn pr_infer(&self, features: &FeatureVector) -> Result<BipolarPattern> {
        Ok(BipolarPattern::top_k(
            &self.pr_activations(features)?,
            self.config.ps_k,
        ))
    }

    pub fn pm_train_step(
        &mut self,
        pattern: &BipolarPattern,
        image: &Grid,
        label: usize,
    ) -> Result<(f64, f64)> {
        image.ensure_shape("PM image target", &[self.image_size, self.image_size])?;
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        // PM sees active units as 1 and the rest as 0; the bipolar form's
        // constant -1 background swamps the first layer.
        let x = pattern.to_unit();
        let image_lr = self.config.pm_image_learning_rate * image.len() as f64;
        let image_loss = self
            .pm_image
            .train_step(&x, image_lr, |out| mse_loss(out, image.data()))?;
        let label_loss =
            self.pm_label
                .train_step(&x, self.config.pm_label_learning_rate, |out| {
                    softmax_cross_entropy(out, label)
                })?;
        Ok((image_loss, label_loss))
    }

    /// Image clamped to `[0, 1]` and label distribution for a PC pattern.
    pub fn pm_infer(&self, pattern: &BipolarPattern) -> Result<(Grid, ClassDistribution)> {
        let x = pattern.to_unit();
        let pixels: Vec<f64> = self
            .pm_image
            .forward(&x)?
            .output
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let image = Grid::new(vec![self.image_size, self.image_size], pixels)?;
        let probs = softmax(&self.pm_label.forward(&x)?.output);
        Ok((image, ClassDistribution::from_probs_unchecked(probs)))
    }

    /// One-shot memorisation of a support set. Expects a freshly reset STM.
    pub fn study(
        &mut self,
        samples: &[(&Grid, usize)],
        ltm: &Ltm,
        shuffle_seed: u64,
    ) -> Result<()> {
        let features = samples
            .iter()
            .map(|(img, _)| ltm.extract_features(img))
            .collect::<Result<Vec<_>>>()?;
        self.study_features(samples, &features, shuffle_seed)
    }

    /// [`Aha::study`] with features already extracted.
    pub fn study_features(
        &mut self,
        samples: &[(&Grid, usize)],
        features: &[FeatureVector],
        shuffle_seed: u64,
    ) -> Result<()> {
        if samples.len() != features.len() {
            return Err(Error::shape("study", &[samples.len()], &[features.len()]));
        }
        if self.pc.stored_count() + samples.len() > self.pc.capacity() {
            return Err(Error::CapacityExceeded {
                capacity: self.pc.capacity(),
            });
        }
        let mut patterns = Vec::with_capacity(samples.len());
        for ((_, label), f) in samples.iter().zip(features) {
            let p = self.ps_separate(f)?;
            self.pc_store(&p)?;
            self.studied.push(StudyRecord {
                pattern: p.clone(),
                label: *label,
            });
            patterns.push(p);
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng: ChaCha8Rng = stream(shuffle_seed, "stm/study_order", 0);
        for _ in 0..self.config.study_epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                self.pr_train_step(&features[i], &patterns[i])?;
                self.pm_train_step(&patterns[i], samples[i].0, samples[i].1)?;
            }
        }
        Ok(())
    }

    pub fn recall(&self, image: &Grid, ltm: &Ltm) -> Result<Recollection> {
        self.recall_features(&ltm.extract_features(image)?)
    }

    pub fn recall_features(&self, features: &FeatureVector) -> Result<Recollection> {
        let cue = self.pr_infer(features)?;
        let settled = self.pc_recall(&cue)?.pattern;
        let (image, label_dist) = self.pm_infer(&settled)?;
        Ok(Recollection {
            image,
            label_dist,
            pattern: settled,
        })
    }

    /// Mean BCE loss of PR and its gradient over all PR parameters, for
    /// gradient checks.
    pub fn pr_loss_and_grad(
        &self,
        features: &FeatureVector,
        target: &BipolarPattern,
    ) -> Result<(f64, Vec<f64>)> {
        let x = self.prepare(features)?;
        net_loss_and_grad(&self.pr, &x, |out| Self::pr_loss(out, target))
    }

    pub fn pm_image_loss_and_grad(
        &self,
        pattern: &BipolarPattern,
        image: &Grid,
    ) -> Result<(f64, Vec<f64>)> {
        net_loss_and_grad(&self.pm_image, &pattern.to_unit(), |out| {
            mse_loss(out, image.data())
        })
    }

    pub fn pm_label_loss_and_grad(
        &self,
        pattern: &BipolarPattern,
        label: usize,
    ) -> Result<(f64, Vec<f64>)> {
        net_loss_and_grad(&self.pm_label, &pattern.to_unit(), |out| {
            softmax_cross_entropy(out, label)
        })
    }

    pub fn pr_mut(&mut self) -> &mut TwoLayerNet {
        &mut self.pr
    }

    pub fn pm_image_mut(&mut self) -> &mut TwoLayerNet {
        &mut self.pm_image
    }

    pub fn pm_label_mut(&mut self) -> &mut TwoLayerNet {
        &mut self.pm_label
    }

    /// Entries are relative; callers place them under their own section.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert_scalar("feature_dim", self.feature_dim as f64);
        c.insert_scalar("image_size", self.image_size as f64);
        c.insert_scalar("num_classes", self.num_classes as f64);
        c.insert_scalar("ps_k", self.config.ps_k as f64);
        c.insert_scalar("inhibition_decay", self.config.inhibition_decay);
        c.insert("ps/projection", self.ps.projection().clone());
        c.insert("ps/inhibition", Grid::vector(self.ps.inhibition().to_vec()));
        c.insert("pc/weights", self.pc.weights().clone());
        c.insert_scalar("pc/stored_count", self.pc.stored_count() as f64);
        c.insert_scalar("pc/capacity", self.pc.capacity() as f64);
        for (name, net) in [
            ("pr", &self.pr),
            ("pm_image", &self.pm_image),
            ("pm_label", &self.pm_label),
        ] {
            c.insert(format!("{name}/hidden_w"), net.hidden.weights.clone());
            c.insert(format!("{name}/hidden_b"), net.hidden.biases.clone());
            c.insert(format!("{name}/output_w"), net.output.weights.clone());
            c.insert(format!("{name}/output_b"), net.output.biases.clone());
        }
        c
    }

    /// Restores weights from [`Aha::to_checkpoint`] output. Inhibition history
    /// and the study record are not restored.
    pub fn load_checkpoint(&mut self, c: &Checkpoint) -> Result<()> {
        let dims = (
            c.scalar_usize("feature_dim")?,
            c.scalar_usize("image_size")?,
            c.scalar_usize("num_classes")?,
        );
        if dims != (self.feature_dim, self.image_size, self.num_classes) {
            return Err(Error::Checkpoint(format!(
                "STM dimensions {dims:?} do not match"
            )));
        }
        self.ps = PatternSeparator::from_parts(
            c.get("ps/projection")?.clone(),
            c.scalar_usize("ps_k")?,
            c.scalar("inhibition_decay")?,
        )?;
        self.pc = HopfieldStore::from_parts(
            c.get("pc/weights")?.clone(),
            c.scalar_usize("pc/stored_count")?,
            c.scalar_usize("pc/capacity")?,
            self.config.storage_rule,
        )?;
        let leak = self.config.leak;
        let load = |name: &str| -> Result<TwoLayerNet> {
            Ok(TwoLayerNet {
                hidden: LayerParams::new(
                    c.get(&format!("{name}/hidden_w"))?.clone(),
                    c.get(&format!("{name}/hidden_b"))?.clone(),
                    false,
                )?,
                output: LayerParams::new(
                    c.get(&format!("{name}/output_w"))?.clone(),
                    c.get(&format!("{name}/output_b"))?.clone(),
                    false,
                )?,
                leak,
            })
        };
        self.pr = load("pr")?;
        self.pm_image = load("pm_image")?;
        self.pm_label = load("pm_label")?;
        self.studied.clear();
        Ok(())
    }
}

fn net_loss_and_grad<F>(net: &TwoLayerNet, x: &[f64], loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let trace = net.forward(x)?;
    let (value, g) = loss(&trace.output)?;
    let (gh, go) = net.gradients(x, &trace, &g)?;
    let mut flat = gh.flat();
    flat.extend(go.flat());
    Ok((value, flat))
}

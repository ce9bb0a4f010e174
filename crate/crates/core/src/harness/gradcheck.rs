use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ltm::{Classifier, FeatureVector, Scae, ScaeConfig};
use crate::stm::{Aha, BipolarPattern, StmConfig};
use crate::tensor::{finite_diff_check, Grid};

pub const GRADCHECK_EPSILON: f64 = 1e-5;

/// Maximum finite-difference relative error of every trainable layer, on
/// reduced sizes, for one seed. SCAE gates are held fixed.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let scae = Scae::new(
        ScaeConfig {
            num_filters: 5,
            receptive_field: 3,
            stride: 1,
            spatial_k: 1,
            pool_size: 2,
        },
        &mut rng,
    )?;
    let batch: Vec<Grid> = (0..2)
        .map(|_| Grid::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0)))
        .collect();
    let traces = batch
        .iter()
        .map(|im| scae.trace(im))
        .collect::<Result<Vec<_>>>()?;
    let gates = scae.training_gates(&traces).gates;
    out.push((
        "scae",
        finite_diff_check(&scae.flat(), GRADCHECK_EPSILON, |theta| {
            let mut m = scae.clone();
            m.set_flat(theta);
            m.loss_and_grad(&batch, &gates).expect("shapes fixed")
        })?,
    ));

    let mut clf = Classifier::new(4, 6);
    clf.params_mut()
        .weights
        .data_mut()
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-1.0..1.0));
    let xs: Vec<FeatureVector> = (0..3)
        .map(|_| FeatureVector::new((0..6).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let cbatch: Vec<(&FeatureVector, usize)> =
        xs.iter().enumerate().map(|(i, x)| (x, i % 4)).collect();
    out.push((
        "classifier",
        finite_diff_check(&clf.params().flat(), GRADCHECK_EPSILON, |theta| {
            let mut m = clf.clone();
            m.params_mut().set_flat(theta);
            m.loss_and_grad(&cbatch).expect("shapes fixed")
        })?,
    ));

    let cfg = StmConfig {
        pattern_size: 30,
        ps_k: 4,
        pr_hidden: 8,
        pm_hidden: 8,
        ..StmConfig::default()
    };
    let aha = Aha::new(cfg, 12, 5, 4, seed, seed.wrapping_add(1))?;
    let f = FeatureVector::new((0..12).map(|_| rng.random_range(0.0..1.0)).collect());
    let p = BipolarPattern::random(30, 4, &mut rng);
    let img = Grid::from_fn(&[5, 5], |_| rng.random_range(0.0..1.0));
    out.push((
        "pr",
        finite_diff_check(&aha.pr().flat(), GRADCHECK_EPSILON, |t| {
            let mut a = aha.clone();
            a.pr_mut().set_flat(t);
            a.pr_loss_and_grad(&f, &p).expect("shapes fixed")
        })?,
    ));
    out.push((
        "pm_image",
        finite_diff_check(&aha.pm_image().flat(), GRADCHECK_EPSILON, |t| {
            let mut a = aha.clone();
            a.pm_image_mut().set_flat(t);
            a.pm_image_loss_and_grad(&p, &img).expect("shapes fixed")
        })?,
    ));
    out.push((
        "pm_label",
        finite_diff_check(&aha.pm_label().flat(), GRADCHECK_EPSILON, |t| {
            let mut a = aha.clone();
            a.pm_label_mut().set_flat(t);
            a.pm_label_loss_and_grad(&p, 2).expect("shapes fixed")
        })?,
    ));
    Ok(out)
}

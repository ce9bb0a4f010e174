use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{linalg, top_k_indices, Grid};

/// State vector over {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BipolarPattern {
    bits: Vec<i8>,
}

impl BipolarPattern {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::InvalidArgument(
                "bipolar bits must be +1 or -1".into(),
            ));
        }
        Ok(BipolarPattern { bits })
    }

    pub fn all_negative(len: usize) -> Self {
        BipolarPattern {
            bits: vec![-1; len],
        }
    }

    /// `+1` at `active`, `-1` elsewhere.
    pub fn from_active(len: usize, active: &[usize]) -> Self {
        let mut bits = vec![-1; len];
        for &i in active {
            bits[i] = 1;
        }
        BipolarPattern { bits }
    }

    /// Top `k` values become `+1`; ties go to the lowest index.
    pub fn top_k(values: &[f64], k: usize) -> Self {
        Self::from_active(values.len(), &top_k_indices(values, k))
    }

    pub fn random(len: usize, active: usize, rng: &mut impl Rng) -> Self {
        let idx = rand::seq::index::sample(rng, len, active.min(len)).into_vec();
        Self::from_active(len, &idx)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> i8 {
        self.bits[i]
    }

    pub fn flip(&mut self, i: usize) {
        self.bits[i] = -self.bits[i];
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.bits.len())
            .filter(|&i| self.bits[i] == 1)
            .collect()
    }

    /// Number of positions that are `+1` in both.
    pub fn overlap(&self, other: &BipolarPattern) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count()
    }

    pub fn hamming(&self, other: &BipolarPattern) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Maps `-1 -> 0`, `+1 -> 1`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b > 0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Pattern Separator: fixed random projection, top-k winners and a refractory
/// inhibition trace that pushes successive samples onto different units.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSeparator {
    projection: Grid,
    inhibition: Vec<f64>,
    k: usize,
    decay: f64,
    /// Largest score range (max - min) seen so far; sets the inhibition level.
    observed_range: f64,
}

impl PatternSeparator {
    pub fn new(
        units: usize,
        feature_dim: usize,
        k: usize,
        decay: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 || k > units {
            return Err(Error::InvalidArgument(format!(
                "ps_k {k} outside 1..={units}"
            )));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "inhibition decay {decay} outside [0, 1)"
            )));
        }
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        Ok(PatternSeparator {
            projection: Grid::from_fn(&[units, feature_dim], |_| dist.sample(rng)),
            inhibition: vec![0.0; units],
            k,
            decay,
            observed_range: 0.0,
        })
    }

    pub fn units(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn projection(&self) -> &Grid {
        &self.projection
    }

    pub fn inhibition(&self) -> &[f64] {
        &self.inhibition
    }

    pub fn projection_fingerprint(&self) -> u64 {
        self.projection.fingerprint()
    }

    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim() {
            return Err(Error::shape(
                "ps_separate",
                &[features.len()],
                self.projection.shape(),
            ));
        }
        let d = self.feature_dim();
        let nz: Vec<usize> = (0..d).filter(|&i| features[i] != 0.0).collect();
        let w = self.projection.data();
        Ok((0..self.units())
            .map(|u| {
                let row = &w[u * d..(u + 1) * d];
                if nz.len() * 2 > d {
                    linalg::dot(row, features)
                } else {
                    nz.iter().map(|&i| row[i] * features[i]).sum()
                }
            })
            .collect())
    }

    pub fn separate(&mut self, features: &[f64]) -> Result<BipolarPattern> {
        let raw = self.scores(features)?;
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            });
        self.observed_range = self.observed_range.max(hi - lo);
        let scores: Vec<f64> = raw
            .iter()
            .zip(&self.inhibition)
            .map(|(s, h)| s - h)
            .collect();
        let winners = top_k_indices(&scores, self.k);
        let level = 2.0 * self.observed_range;
        for &w in &winners {
            self.inhibition[w] = level;
        }
        for h in &mut self.inhibition {
            *h *= self.decay;
        }
        Ok(BipolarPattern::from_active(self.units(), &winners))
    }

    pub fn clear_inhibition(&mut self) {
        self.inhibition.iter_mut().for_each(|h| *h = 0.0);
        self.observed_range = 0.0;
    }

    pub(crate) fn from_parts(projection: Grid, k: usize, decay: f64) -> Result<Self> {
        if projection.ndim() != 2 || k == 0 || k > projection.shape()[0] {
            return Err(Error::Checkpoint("pattern separator projection".into()));
        }
        let units = projection.shape()[0];
        Ok(PatternSeparator {
            projection,
            inhibition: vec![0.0; units],
            k,
            decay,
            observed_range: 0.0,
        })
    }
}

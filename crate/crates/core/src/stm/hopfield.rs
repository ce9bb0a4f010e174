use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{top_k_indices, Grid};

use super::pattern::BipolarPattern;

/// Update rule for one synchronous recall iteration given the local fields
/// `h = W s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "k")]
pub enum RecallRule {
    /// `s_i <- sign(h_i)`; a zero field keeps the previous bit.
    Sign,
    /// The `k` largest fields become `+1` (ties to the lowest index). Keeps the
    /// state at the sparsity of the stored codes.
    KWinners(usize),
}

/// How a stored pattern increments the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageRule {
    /// `W += p pᵀ / N` on the bipolar pattern.
    #[default]
    Hebbian,
    /// `W += (x - a)(x - a)ᵀ / N` with `x` the 0/1 form of the pattern and
    /// `a` its active fraction. Removes the common-mode term that swamps
    /// sparse codes under the plain rule.
    Covariance,
    /// Storkey's local rule on the bipolar pattern:
    /// `W_ij += (p_i p_j - p_i h_ji - h_ij p_j) / N` with
    /// `h_ij = sum_{k != i, j} W_ik p_k` taken before the update. Roughly
    /// triples the dense-pattern capacity of the plain rule.
    Storkey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallOutcome {
    pub pattern: BipolarPattern,
    pub iterations: usize,
    pub converged: bool,
    /// Energy of the cue followed by the energy after each iteration.
    pub energies: Vec<f64>,
}

/// Pattern Completer: Hebbian auto-associative store.
/// Invariant: `weights` symmetric with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HopfieldStore {
    weights: Grid,
    stored_count: usize,
    capacity: usize,
    storage: StorageRule,
}

impl HopfieldStore {
    pub fn new(units: usize, capacity: usize) -> Self {
        Self::with_storage(units, capacity, StorageRule::Hebbian)
    }

    pub fn with_storage(units: usize, capacity: usize, storage: StorageRule) -> Self {
        HopfieldStore {
            weights: Grid::zeros(&[units, units]),
            stored_count: 0,
            capacity,
            storage,
        }
    }

    pub fn storage(&self) -> StorageRule {
        self.storage
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weights(&self) -> &Grid {
        &self.weights
    }

    pub fn stored_count(&self) -> usize {
        self.stored_count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        self.stored_count = 0;
    }

    fn check_len(&self, p: &BipolarPattern, op: &'static str) -> Result<()> {
        if p.len() != self.units() {
            return Err(Error::shape(op, &[p.len()], &[self.units()]));
        }
        Ok(())
    }

    /// Outer-product increment per [`StorageRule`], diagonal kept at zero.
    pub fn store(&mut self, pattern: &BipolarPattern) -> Result<()> {
        self.check_len(pattern, "pc_store")?;
        if self.stored_count >= self.capacity {
            return Err(Error::CapacityExceeded {
                capacity: self.capacity,
            });
        }
        match self.storage {
            StorageRule::Hebbian => self.add_outer(&pattern.to_f64()),
            StorageRule::Covariance => {
                let a = pattern.active_count() as f64 / pattern.len() as f64;
                let v: Vec<f64> = pattern.to_unit().into_iter().map(|x| x - a).collect();
                self.add_outer(&v);
            }
            StorageRule::Storkey => self.add_storkey(pattern),
        }
        self.stored_count += 1;
        Ok(())
    }

    fn add_outer(&mut self, v: &[f64]) {
        let n = self.units();
        let inv = 1.0 / n as f64;
        let w = self.weights.data_mut();
        for i in 0..n {
            let row = &mut w[i * n..(i + 1) * n];
            for (j, wij) in row.iter_mut().enumerate() {
                // (v_i v_j) / n rounds identically for (i, j) and (j, i)
                if i != j {
                    *wij += v[i] * v[j] * inv;
                }
            }
        }
    }

    fn add_storkey(&mut self, pattern: &BipolarPattern) {
        let n = self.units();
        let inv = 1.0 / n as f64;
        let p = pattern.to_f64();
        let f = self.fields(pattern.bits());
        let w = self.weights.data_mut();
        // upper triangle from the old weights, mirrored, so W stays exactly symmetric
        for i in 0..n {
            for j in i + 1..n {
                let wij = w[i * n + j];
                let h_ij = f[i] - wij * p[j];
                let h_ji = f[j] - wij * p[i];
                let next = wij + (p[i] * p[j] - p[i] * h_ji - h_ij * p[j]) * inv;
                w[i * n + j] = next;
                w[j * n + i] = next;
            }
        }
    }

    pub fn fields(&self, state: &[i8]) -> Vec<f64> {
        let n = self.units();
        let w = self.weights.data();
        (0..n)
            .map(|i| {
                w[i * n..(i + 1) * n]
                    .iter()
                    .zip(state)
                    .map(|(wij, &s)| wij * s as f64)
                    .sum()
            })
            .collect()
    }

    /// `E = -½ sᵀ W s`.
    pub fn energy(&self, pattern: &BipolarPattern) -> f64 {
        let h = self.fields(pattern.bits());
        -0.5 * h
            .iter()
            .zip(pattern.bits())
            .map(|(h, &s)| h * s as f64)
            .sum::<f64>()
    }

    /// Synchronous updates until a fixed point or `max_iters`.
    pub fn recall(
        &self,
        cue: &BipolarPattern,
        max_iters: usize,
        rule: RecallRule,
    ) -> Result<RecallOutcome> {
        self.check_len(cue, "pc_recall")?;
        if max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters must be at least 1".into(),
            ));
        }
        let mut state = cue.clone();
        let mut energies = vec![self.energy(&state)];
        for it in 1..=max_iters {
            let h = self.fields(state.bits());
            let next = match rule {
                RecallRule::Sign => {
                    let bits = h
                        .iter()
                        .zip(state.bits())
                        .map(|(&f, &prev)| {
                            if f > 0.0 {
                                1
                            } else if f < 0.0 {
                                -1
                            } else {
                                prev
                            }
                        })
                        .collect();
                    BipolarPattern::new(bits)?
                }
                RecallRule::KWinners(k) => {
                    BipolarPattern::from_active(h.len(), &top_k_indices(&h, k))
                }
            };
            energies.push(self.energy(&next));
            if next == state {
                return Ok(RecallOutcome {
                    pattern: next,
                    iterations: it,
                    converged: true,
                    energies,
                });
            }
            state = next;
        }
        Ok(RecallOutcome {
            pattern: state,
            iterations: max_iters,
            converged: false,
            energies,
        })
    }

    pub(crate) fn from_parts(
        weights: Grid,
        stored_count: usize,
        capacity: usize,
        storage: StorageRule,
    ) -> Result<Self> {
        if weights.ndim() != 2 || weights.shape()[0] != weights.shape()[1] {
            return Err(Error::Checkpoint("hopfield weights must be square".into()));
        }
        Ok(HopfieldStore {
            weights,
            stored_count,
            capacity,
            storage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dense(n: usize, rng: &mut impl Rng) -> BipolarPattern {
        BipolarPattern::new(
            (0..n)
                .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
                .collect(),
        )
        .unwrap()
    }

    fn assert_symmetric_zero_diag(s: &HopfieldStore) {
        let n = s.units();
        let w = s.weights().data();
        for i in 0..n {
            assert_eq!(w[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(w[i * n + j], w[j * n + i]);
            }
        }
    }

    #[test]
    fn empty_store_returns_cue() {
        let s = HopfieldStore::new(16, 4);
        let cue = BipolarPattern::from_active(16, &[0, 3]);
        let out = s.recall(&cue, 50, RecallRule::Sign).unwrap();
        assert_eq!(out.pattern, cue);
        assert!(out.converged);
    }

    #[test]
    fn single_pattern_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = HopfieldStore::new(225, 20);
        let p = random_dense(225, &mut rng);
        s.store(&p).unwrap();
        assert_symmetric_zero_diag(&s);
        let out = s.recall(&p, 50, RecallRule::Sign).unwrap();
        assert_eq!(out.pattern, p);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn five_patterns_recalled_from_noisy_cues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = HopfieldStore::new(225, 20);
        let pats: Vec<_> = (0..5).map(|_| random_dense(225, &mut rng)).collect();
        for p in &pats {
            s.store(p).unwrap();
        }
        for p in &pats {
            let mut cue = p.clone();
            for i in rand::seq::index::sample(&mut rng, 225, 22) {
                cue.flip(i);
            }
            let out = s.recall(&cue, 50, RecallRule::Sign).unwrap();
            assert_eq!(&out.pattern, p);
            assert!(out.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn sparse_codes_recalled_with_k_winners() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = HopfieldStore::with_storage(225, 20, StorageRule::Covariance);
        let pats: Vec<_> = (0..20)
            .map(|_| BipolarPattern::random(225, 10, &mut rng))
            .collect();
        for p in &pats {
            s.store(p).unwrap();
        }
        for p in &pats {
            let mut active = p.active();
            active.truncate(7);
            let cue = BipolarPattern::from_active(225, &active);
            let out = s.recall(&cue, 50, RecallRule::KWinners(10)).unwrap();
            assert_eq!(&out.pattern, p);
        }
    }

    #[test]
    fn plain_rule_loses_sparse_codes_to_common_mode() {
        // Units shared by several stored codes outscore the cued code's own units.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = HopfieldStore::new(225, 20);
        let pats: Vec<_> = (0..20)
            .map(|_| BipolarPattern::random(225, 10, &mut rng))
            .collect();
        for p in &pats {
            s.store(p).unwrap();
        }
        let exact = pats
            .iter()
            .filter(|p| {
                let mut active = p.active();
                active.truncate(7);
                let cue = BipolarPattern::from_active(225, &active);
                &s.recall(&cue, 50, RecallRule::KWinners(10))
                    .unwrap()
                    .pattern
                    == *p
            })
            .count();
        assert!(exact < 20);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut s = HopfieldStore::new(8, 1);
        let p = BipolarPattern::from_active(8, &[1]);
        s.store(&p).unwrap();
        assert!(matches!(
            s.store(&p),
            Err(Error::CapacityExceeded { capacity: 1 })
        ));
        assert!(s.store(&BipolarPattern::from_active(7, &[1])).is_err());
    }

    #[test]
    fn storkey_matches_naive_sum() {
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patterns: Vec<BipolarPattern> = (0..4).map(|_| random_dense(n, &mut rng)).collect();
        let mut s = HopfieldStore::with_storage(n, 4, StorageRule::Storkey);
        let mut w = vec![vec![0.0f64; n]; n];
        for p in &patterns {
            s.store(p).unwrap();
            let x: Vec<f64> = p.to_f64();
            let h = |w: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
                (0..n)
                    .filter(|&k| k != i && k != j)
                    .map(|k| w[i][k] * x[k])
                    .sum()
            };
            let mut next = w.clone();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        next[i][j] +=
                            (x[i] * x[j] - x[i] * h(&w, j, i) - h(&w, i, j) * x[j]) / n as f64;
                    }
                }
            }
            w = next;
        }
        for (i, row) in w.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                assert!((s.weights().at2(i, j) - want).abs() < 1e-12);
            }
        }
        assert_symmetric_zero_diag(&s);
    }

    #[test]
    fn storkey_keeps_dense_patterns_stable_where_plain_rule_slips() {
        let n = 225;
        let (mut plain_fixed, mut storkey_fixed) = (0, 0);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let patterns: Vec<BipolarPattern> =
                (0..20).map(|_| random_dense(n, &mut rng)).collect();
            let mut plain = HopfieldStore::new(n, 20);
            let mut storkey = HopfieldStore::with_storage(n, 20, StorageRule::Storkey);
            for p in &patterns {
                plain.store(p).unwrap();
                storkey.store(p).unwrap();
            }
            for p in &patterns {
                plain_fixed +=
                    usize::from(plain.recall(p, 1, RecallRule::Sign).unwrap().pattern == *p);
                storkey_fixed +=
                    usize::from(storkey.recall(p, 1, RecallRule::Sign).unwrap().pattern == *p);
            }
        }
        assert_eq!(storkey_fixed, 200);
        assert!(plain_fixed < 200, "plain rule kept all {plain_fixed} fixed");
    }
}

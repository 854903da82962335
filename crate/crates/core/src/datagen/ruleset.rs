//! Synthetic n-th order ordering rules over integer keys.
//!
//! Element `i` scores
//!
//! ```text
//! score(i) = sum over (n_rel - 1)-subsets S of the other elements of
//!            (key_i + sum_{j in S} key_j)^2 mod M
//! ```
//!
//! and the target sorts by `(score, key, index)`. The squared sum inside the
//! modulus couples all `n_rel` keys of a term, so no sum of lower-order
//! terms reproduces it.

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::{Dataset, Instance, TaskTag};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::permutation::Permutation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesetConfig {
    /// Interaction order.
    pub n_rel: usize,
    pub modulus: u64,
    /// Keys are drawn from `1..=key_max`.
    pub key_max: u64,
    /// Inclusive set-size range.
    pub cardinality_range: [usize; 2],
    /// Uniform noise features appended to every element.
    pub distractor_dims: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for RulesetConfig {
    fn default() -> Self {
        Self {
            n_rel: 3,
            modulus: 97,
            key_max: 50,
            cardinality_range: [10, 15],
            distractor_dims: 2,
            count: 1000,
            seed: 0,
        }
    }
}

impl RulesetConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.cardinality_range;
        if self.n_rel < 2 {
            return Err(Error::Config(format!("ruleset n_rel must be >= 2, got {}", self.n_rel)));
        }
        if lo > hi || self.n_rel > lo {
            return Err(Error::Config(format!(
                "ruleset cardinality_range [{lo}, {hi}] must be ordered with min >= n_rel = {}",
                self.n_rel
            )));
        }
        if self.modulus < 2 || self.key_max < 1 {
            return Err(Error::Config("ruleset modulus must be >= 2 and key_max >= 1".into()));
        }
        Ok(())
    }

    /// Width of an element feature row: scaled key, key one-hot, noise.
    pub fn d_raw(&self) -> usize {
        1 + self.key_max as usize + self.distractor_dims
    }
}

/// Order-`n_rel` score of element `i`.
pub fn ruleset_score(keys: &[u64], i: usize, cfg: &RulesetConfig) -> Result<u64> {
    if cfg.n_rel > keys.len() {
        return Err(Error::InvalidArgument(format!(
            "order {} needs at least that many elements, got {}",
            cfg.n_rel,
            keys.len()
        )));
    }
    if i >= keys.len() {
        return Err(Error::InvalidArgument(format!("element {i} out of range")));
    }
    let m = cfg.modulus;
    let others = (0..keys.len()).filter(|&j| j != i);
    Ok(others
        .combinations(cfg.n_rel - 1)
        .map(|subset| {
            let s = keys[i] + subset.iter().map(|&j| keys[j]).sum::<u64>();
            (s % m) * (s % m) % m
        })
        .sum())
}

/// Target ordering: ascending `(score, key, index)`.
pub fn ruleset_order(keys: &[u64], cfg: &RulesetConfig) -> Result<Permutation> {
    let scores = (0..keys.len()).map(|i| ruleset_score(keys, i, cfg)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| (scores[i], keys[i], i));
    Permutation::new(order)
}

fn sample_keys(n: usize, cfg: &RulesetConfig, rng: &mut SeededRng) -> Vec<u64> {
    if cfg.key_max as usize >= n {
        rng.permutation(cfg.key_max as usize)
            .into_iter()
            .take(n)
            .map(|k| k as u64 + 1)
            .collect()
    } else {
        (0..n).map(|_| rng.int_inclusive(1, cfg.key_max as usize) as u64).collect()
    }
}

pub(crate) fn features(keys: &[u64], cfg: &RulesetConfig, rng: &mut SeededRng) -> Matrix {
    let mut x = Matrix::zeros(keys.len(), cfg.d_raw());
    for (r, &k) in keys.iter().enumerate() {
        let row = x.row_mut(r);
        row[0] = k as f64 / cfg.key_max as f64;
        row[k as usize] = 1.0;
        for v in &mut row[1 + cfg.key_max as usize..] {
            *v = rng.uniform_range(-1.0, 1.0);
        }
    }
    x
}

/// Sets of keys (distinct whenever the key range allows it) with their
/// rule-sorted targets.
pub fn gen_ruleset(cfg: &RulesetConfig) -> Result<Dataset> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::derive(cfg.seed, i as u64);
            let n = rng.int_inclusive(cfg.cardinality_range[0], cfg.cardinality_range[1]);
            let keys = sample_keys(n, cfg, &mut rng);
            let x = features(&keys, cfg, &mut rng);
            let target = ruleset_order(&keys, cfg)?;
            let mut meta = Map::new();
            meta.insert("keys".into(), json!(keys));
            meta.insert("n_rel".into(), json!(cfg.n_rel));
            meta.insert("modulus".into(), json!(cfg.modulus));
            Instance::new(x, Some(target), TaskTag::Ruleset, meta)
        })
        .collect()
}

/// True iff `perm` lists the elements in non-decreasing `(score, key, index)`.
/// The rule order and modulus are read from the instance when present.
pub fn check_ruleset(inst: &Instance, perm: &Permutation, cfg: &RulesetConfig) -> Result<bool> {
    let keys: Vec<u64> = inst.meta_field("keys")?;
    let cfg = RulesetConfig {
        n_rel: inst.meta_field("n_rel").unwrap_or(cfg.n_rel),
        modulus: inst.meta_field("modulus").unwrap_or(cfg.modulus),
        ..cfg.clone()
    };
    if perm.len() != keys.len() {
        return Err(Error::InvalidPermutation(format!("ordering of {} over {} elements", perm.len(), keys.len())));
    }
    let scores = (0..keys.len()).map(|i| ruleset_score(&keys, i, &cfg)).collect::<Result<Vec<_>>>()?;
    let rank = |i: usize| (scores[i], keys[i], i);
    Ok(perm.indices().windows(2).all(|w| rank(w[0]) <= rank(w[1])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_rel: usize) -> RulesetConfig {
        RulesetConfig { n_rel, ..Default::default() }
    }

    /// Naive enumerator over index bitmasks.
    fn naive_score(keys: &[u64], i: usize, n_rel: usize, m: u64) -> u64 {
        let n = keys.len();
        let mut total = 0;
        for mask in 0u32..(1 << n) {
            if mask & (1 << i) != 0 || mask.count_ones() as usize != n_rel - 1 {
                continue;
            }
            let s: u64 = keys[i] + (0..n).filter(|&j| mask & (1 << j) != 0).map(|j| keys[j]).sum::<u64>();
            total += s * s % m;
        }
        total
    }

    #[test]
    fn pair_example() {
        assert_eq!(ruleset_score(&[1, 2, 3], 0, &cfg(2)).unwrap(), 25);
        assert!(ruleset_score(&[1, 2], 0, &cfg(3)).is_err());
    }

    #[test]
    fn full_order_has_one_subset() {
        let keys = [4, 9, 11];
        for i in 0..3 {
            assert_eq!(ruleset_score(&keys, i, &cfg(3)).unwrap(), 24u64.pow(2) % 97);
        }
    }

    #[test]
    fn scores_are_symmetric() {
        let keys = [5, 17, 3, 42, 8, 23];
        let perm = [3, 0, 5, 1, 4, 2];
        let shuffled: Vec<u64> = perm.iter().map(|&p| keys[p]).collect();
        for (slot, &p) in perm.iter().enumerate() {
            assert_eq!(ruleset_score(&shuffled, slot, &cfg(3)).unwrap(), ruleset_score(&keys, p, &cfg(3)).unwrap());
        }
    }

    #[test]
    fn equal_keys_give_identity() {
        let keys = vec![7; 6];
        assert_eq!(ruleset_order(&keys, &cfg(3)).unwrap(), Permutation::identity(6));
    }

    #[test]
    fn order_matches_naive_enumerator() {
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let keys: Vec<u64> = (0..5).map(|_| rng.int_inclusive(1, 50) as u64).collect();
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by_key(|&i| (naive_score(&keys, i, 3, 97), keys[i], i));
            assert_eq!(ruleset_order(&keys, &cfg(3)).unwrap().indices(), &order[..]);
        }
    }

    #[test]
    fn generated_targets_pass_checker() {
        for n_rel in [2, 3, 4, 5] {
            let c = RulesetConfig { n_rel, count: 100, seed: n_rel as u64, ..Default::default() };
            for inst in gen_ruleset(&c).unwrap() {
                let t = inst.target.as_ref().unwrap();
                assert!(check_ruleset(&inst, t, &c).unwrap());
                let keys: Vec<u64> = inst.meta_field("keys").unwrap();
                let mut distinct = keys.clone();
                distinct.sort();
                distinct.dedup();
                assert_eq!(distinct.len(), keys.len());
                assert_eq!(inst.d_raw(), c.d_raw());
            }
        }
    }

    #[test]
    fn adjacent_swap_is_rejected() {
        let c = RulesetConfig { count: 20, ..Default::default() };
        for inst in gen_ruleset(&c).unwrap() {
            let mut t = inst.target.clone().unwrap().into_inner();
            t.swap(0, 1);
            assert!(!check_ruleset(&inst, &Permutation::new(t).unwrap(), &c).unwrap());
        }
    }

    #[test]
    fn generation_is_seed_stable() {
        let c = RulesetConfig { count: 10, seed: 3, ..Default::default() };
        assert_eq!(gen_ruleset(&c).unwrap(), gen_ruleset(&c).unwrap());
        assert!(gen_ruleset(&RulesetConfig { n_rel: 11, ..c }).is_err());
    }
}

//! Seeded k-fold case splits and their JSON split files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub k: usize,
    pub seed: u64,
}

/// Shuffle the ids with `seed` and cut them into `k` contiguous chunks of
/// near-equal size.
///
/// When `k` training sets of `round(n · train_fraction)` cases fit without
/// overlap (the small-training-set protocol, e.g. 4 of 20), chunk `i` is the
/// training set of fold `i` and its complement the test set. Otherwise chunk
/// `i` is the test set and the training set is the first
/// `round(n · train_fraction)` cases of the shuffled complement.
pub fn make_split(case_ids: &[String], k: usize, seed: u64, train_fraction: f64) -> Result<SplitPlan> {
    let n = case_ids.len();
    if k < 2 {
        return Err(Error::Config("a split needs at least two folds".into()));
    }
    if n < k {
        return Err(Error::Config(format!("{n} cases are too few for {k} folds")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut sorted = case_ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::Config("case ids must be unique".into()));
    }
    let mut ids = case_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let chunks = chunk_bounds(n, k);
    let chunk_is_train = n_train * k <= n;
    let folds = chunks
        .iter()
        .map(|&(lo, hi)| {
            let chunk: Vec<String> = ids[lo..hi].to_vec();
            let rest: Vec<String> = ids[..lo].iter().chain(&ids[hi..]).cloned().collect();
            if chunk_is_train {
                Fold {
                    train: chunk,
                    test: rest,
                }
            } else {
                let take = n_train.min(rest.len());
                Fold {
                    train: rest[..take].to_vec(),
                    test: chunk,
                }
            }
        })
        .collect();
    Ok(SplitPlan { folds, k, seed })
}

fn chunk_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut lo = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push((lo, lo + len));
        lo += len;
    }
    out
}

impl SplitPlan {
    pub fn fold(&self, i: usize) -> Result<&Fold> {
        self.folds
            .get(i)
            .ok_or_else(|| Error::Config(format!("fold {i} out of range for {} folds", self.folds.len())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: SplitPlan =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad split file: {e}")))?;
        for (i, f) in plan.folds.iter().enumerate() {
            if f.train.iter().any(|id| f.test.contains(id)) {
                return Err(Error::format(path, format!("fold {i} overlaps train and test")));
            }
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:02}")).collect()
    }

    #[test]
    fn small_training_protocol_shape() {
        let plan = make_split(&ids(20), 5, 0, 0.2).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let mut seen = BTreeSet::new();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.test.len()), (4, 16));
            assert!(f.train.iter().all(|id| !f.test.contains(id)));
            for id in &f.train {
                assert!(seen.insert(id.clone()), "training sets overlap");
            }
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn two_ids_two_folds() {
        let plan = make_split(&ids(2), 2, 7, 0.5).unwrap();
        let got: BTreeSet<(Vec<String>, Vec<String>)> =
            plan.folds.iter().map(|f| (f.train.clone(), f.test.clone())).collect();
        let a = "case_00".to_string();
        let b = "case_01".to_string();
        let want: BTreeSet<_> = [(vec![a.clone()], vec![b.clone()]), (vec![b], vec![a])].into();
        assert_eq!(got, want);
    }

    #[test]
    fn standard_protocol_has_disjoint_covering_tests() {
        let plan = make_split(&ids(23), 5, 3, 0.8).unwrap();
        let mut seen = BTreeSet::new();
        for f in &plan.folds {
            assert!(f.train.iter().all(|id| !f.test.contains(id)));
            for id in &f.test {
                assert!(seen.insert(id.clone()));
            }
        }
        assert_eq!(seen.len(), 23);
    }

    #[test]
    fn deterministic_and_round_trips() {
        let a = make_split(&ids(20), 5, 11, 0.2).unwrap();
        assert_eq!(a, make_split(&ids(20), 5, 11, 0.2).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        a.save(&p).unwrap();
        assert_eq!(SplitPlan::load(&p).unwrap(), a);
    }

    #[test]
    fn too_few_cases_is_an_error() {
        assert!(make_split(&ids(3), 5, 0, 0.2).is_err());
        assert!(make_split(&ids(3), 1, 0, 0.2).is_err());
    }
}

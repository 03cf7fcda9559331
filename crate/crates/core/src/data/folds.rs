//! Stratified k-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids outside and inside `fold`, in id order.
    pub fn train_test(&self, fold: usize) -> (Vec<String>, Vec<String>) {
        let (test, train): (Vec<_>, Vec<_>) =
            self.assignments.iter().partition(|(_, &f)| f == fold);
        (
            train.into_iter().map(|(id, _)| id.clone()).collect(),
            test.into_iter().map(|(id, _)| id.clone()).collect(),
        )
    }
}

/// Shuffles each class with a seeded RNG and deals it round-robin over the
/// folds, continuing the deal position across classes so fold sizes stay
/// within one of each other as well.
pub fn make_folds(items: &[(String, usize)], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, class) in items {
        by_class.entry(*class).or_default().push(id);
    }
    if let Some((class, ids)) = by_class.iter().find(|(_, ids)| ids.len() < k) {
        return Err(Error::Data(format!(
            "class {class} has {} crops, fewer than {k} folds",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            if assignments.insert(id.to_string(), next % k).is_some() {
                return Err(Error::Data(format!("duplicate crop id {id}")));
            }
            next += 1;
        }
    }
    Ok(FoldSplit {
        k,
        seed,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(counts: &[usize]) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                v.push((format!("c{c}-{i:04}"), c));
            }
        }
        v
    }

    #[test]
    fn balanced_classes_split_evenly() {
        let split = make_folds(&items(&[25, 25, 25, 25]), 5, 1).unwrap();
        for f in 0..5 {
            let (_, test) = split.train_test(f);
            for c in 0..4 {
                assert_eq!(
                    test.iter()
                        .filter(|id| id.starts_with(&format!("c{c}-")))
                        .count(),
                    5
                );
            }
        }
        assert_eq!(split, make_folds(&items(&[25, 25, 25, 25]), 5, 1).unwrap());
        assert_ne!(split, make_folds(&items(&[25, 25, 25, 25]), 5, 2).unwrap());
    }

    #[test]
    fn too_few_per_class() {
        assert!(make_folds(&items(&[10, 3]), 5, 0).is_err());
        assert!(make_folds(&items(&[10]), 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn stratified_within_one(counts in proptest::collection::vec(5usize..40, 1..6), k in 2usize..6, seed in 0u64..1000) {
            let it = items(&counts);
            let split = make_folds(&it, k, seed).unwrap();
            prop_assert_eq!(split.assignments.len(), it.len());
            for (c, _) in counts.iter().enumerate() {
                let mut per = vec![0usize; k];
                for (id, class) in &it {
                    if *class == c {
                        per[split.fold_of(id).unwrap()] += 1;
                    }
                }
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
            let mut sizes = vec![0usize; k];
            for f in split.assignments.values() {
                sizes[*f] += 1;
            }
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of every example to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Indices held out in fold `f`, ascending.
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    /// Indices used for training when fold `f` is held out, ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

// Deals shuffled members round-robin, continuing the rotation across
// classes so the fold totals stay within one of each other.
fn deal(groups: Vec<Vec<usize>>, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut assignment = vec![0; n];
    let mut next = 0;
    for mut members in groups {
        members.shuffle(rng);
        for i in members {
            assignment[i] = next;
            next = (next + 1) % k;
        }
    }
    assignment
}

/// Folds whose sizes differ by at most one, with each class spread the same
/// way.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Parameter(format!("fold count must be at least 2, got {k}")));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut groups = Vec::new();
    for &class in &classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Stratification {
                class,
                count: members.len(),
                k,
            });
        }
        groups.push(members);
    }
    // a class absent altogether cannot be spread over k folds either
    for class in [0u8, 1] {
        if !classes.contains(&class) {
            return Err(Error::Stratification { class, count: 0, k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = deal(groups, labels.len(), k, &mut rng);
    Ok(FoldPlan { k, seed, assignment })
}

/// Plain shuffled folds, ignoring labels.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || n < k {
        return Err(Error::Parameter(format!("cannot split {n} examples into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = deal(vec![(0..n).collect()], n, k, &mut rng);
    Ok(FoldPlan { k, seed, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spread(counts: impl Iterator<Item = usize>) -> usize {
        let v: Vec<usize> = counts.collect();
        v.iter().max().unwrap() - v.iter().min().unwrap()
    }

    #[test]
    fn corpus_of_1145_into_ten_folds() {
        let labels: Vec<u8> = (0..1145).map(|i| (i < 563) as u8).collect();
        let plan = stratified_kfold(&labels, 10, 3).unwrap();
        assert!(plan.fold_sizes().iter().all(|s| [114, 115].contains(s)));
        for f in 0..10 {
            let pos = plan.test_indices(f).iter().filter(|&&i| labels[i] == 1).count();
            assert!([56, 57].contains(&pos), "fold {f}: {pos}");
        }
    }

    #[test]
    fn too_small_class_is_rejected() {
        let labels = [0, 0, 0, 1, 1];
        assert!(matches!(
            stratified_kfold(&labels, 3, 0),
            Err(Error::Stratification { class: 1, count: 2, k: 3 })
        ));
        assert!(stratified_kfold(&[0, 0, 0], 2, 0).is_err());
        assert!(stratified_kfold(&[0, 1, 0, 1], 1, 0).is_err());
    }

    #[test]
    fn seed_determines_plan() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        assert_eq!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 9).unwrap());
        assert_ne!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 10).unwrap());
        let p = kfold(23, 4, 1).unwrap();
        assert!(spread(p.fold_sizes().into_iter()) <= 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn partition_and_stratification_laws(
            labels in prop::collection::vec(0u8..2, 4..300),
            k in 2usize..12,
            seed in any::<u64>(),
        ) {
            let pos = labels.iter().filter(|&&l| l == 1).count();
            let neg = labels.len() - pos;
            match stratified_kfold(&labels, k, seed) {
                Err(_) => prop_assert!(pos < k || neg < k),
                Ok(plan) => {
                    prop_assert!(pos >= k && neg >= k);
                    prop_assert_eq!(plan.assignment.len(), labels.len());
                    let mut seen = vec![0usize; labels.len()];
                    for f in 0..k {
                        let test = plan.test_indices(f);
                        let train = plan.train_indices(f);
                        prop_assert_eq!(test.len() + train.len(), labels.len());
                        for i in test { seen[i] += 1; }
                    }
                    prop_assert!(seen.iter().all(|&c| c == 1));
                    prop_assert!(spread(plan.fold_sizes().into_iter()) <= 1);
                    for class in [0u8, 1] {
                        let per_fold = (0..k).map(|f| {
                            plan.test_indices(f).iter().filter(|&&i| labels[i] == class).count()
                        });
                        prop_assert!(spread(per_fold) <= 1);
                    }
                }
            }
        }
    }
}

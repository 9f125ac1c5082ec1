//! Stratified k-fold plans.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SkeletonSequence;
use crate::error::{Error, Result};

/// Test-fold index of every sequence id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

/// Groups base sequences by subject, deals the groups of each label
/// round-robin over folds in seeded random order, and places augmented
/// copies with their source.
pub fn make_folds(dataset: &[SkeletonSequence], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {k}")));
    }
    let mut subjects: BTreeMap<&str, (usize, Vec<&str>)> = BTreeMap::new();
    for s in dataset.iter().filter(|s| s.origin.is_none()) {
        let entry = subjects.entry(&s.subject).or_insert((s.label, Vec::new()));
        entry.1.push(&s.id);
    }
    if subjects.len() < k {
        return Err(Error::contract(format!(
            "{} independent subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<&Vec<&str>>> = BTreeMap::new();
    for (label, ids) in subjects.values() {
        by_label.entry(*label).or_default().push(ids);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0usize;
    for groups in by_label.values_mut() {
        groups.shuffle(&mut rng);
        for ids in groups.iter() {
            for id in ids.iter() {
                assignments.insert(id.to_string(), next % k);
            }
            next += 1;
        }
    }
    for s in dataset {
        if let Some(origin) = &s.origin {
            let fold = *assignments.get(origin.as_str()).ok_or_else(|| {
                Error::Data(format!(
                    "augmented sequence `{}` has no source `{origin}` in the dataset",
                    s.id
                ))
            })?;
            assignments.insert(s.id.clone(), fold);
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Result<usize> {
        self.assignments
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("sequence `{id}` is not in the fold plan")))
    }

    /// Dataset indices of the test and training split of `fold`.
    pub fn split(
        &self,
        dataset: &[SkeletonSequence],
        fold: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(Error::contract(format!(
                "fold {fold} out of range for k = {}",
                self.k
            )));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in dataset.iter().enumerate() {
            if self.fold_of(&s.id)? == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{augment_dataset, Source};
    use crate::tensor::Tensor;

    fn dataset(n: usize) -> Vec<SkeletonSequence> {
        (0..n)
            .map(|i| {
                SkeletonSequence::new(
                    format!("q{i}"),
                    i % 2,
                    format!("p{i}"),
                    Source::Synthetic,
                    Tensor::zeros(&[1, 1, 3]),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn ten_balanced_into_five() {
        let d = dataset(10);
        let plan = make_folds(&d, 5, 3).unwrap();
        for f in 0..5 {
            let (_, test) = plan.split(&d, f).unwrap();
            assert_eq!(test.len(), 2);
            assert_eq!(test.iter().map(|&i| d[i].label).sum::<usize>(), 1);
        }
        assert_eq!(plan, make_folds(&d, 5, 3).unwrap());
    }

    #[test]
    fn augmented_copies_follow_their_source() {
        let d = augment_dataset(&dataset(12), 1.03).unwrap();
        let plan = make_folds(&d, 4, 0).unwrap();
        for s in d.iter().filter(|s| s.origin.is_some()) {
            assert_eq!(
                plan.fold_of(&s.id).unwrap(),
                plan.fold_of(s.origin.as_ref().unwrap()).unwrap()
            );
        }
    }

    #[test]
    fn too_few_sequences() {
        assert!(matches!(
            make_folds(&dataset(3), 5, 0),
            Err(Error::Contract(_))
        ));
    }
}

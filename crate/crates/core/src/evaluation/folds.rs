use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    /// Checks that the three roles are disjoint and cover `subjects`.
    pub fn check(&self, subjects: &[String]) -> Result<()> {
        let sets = [&self.train, &self.val, &self.test].map(|v| v.iter().collect::<BTreeSet<_>>());
        let total: usize = sets.iter().map(BTreeSet::len).sum();
        let union: BTreeSet<_> = sets.iter().flatten().copied().collect();
        let all: BTreeSet<_> = subjects.iter().collect();
        if total != union.len() || union != all || total != self.train.len() + self.val.len() + self.test.len() {
            return Err(Error::Config(format!("fold {} leaks or drops subjects", self.fold)));
        }
        Ok(())
    }
}

/// Subject-grouped k-fold split: `k` near-equal test partitions of the
/// shuffled subjects and, per fold, `val_count` validation subjects drawn
/// from the remainder.
pub fn split_subject_kfold(subjects: &[String], k: usize, val_count: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        return Err(Error::Config("duplicate subject ids".into()));
    }
    // the largest test fold leaves n - ceil(n / k) subjects for val and train
    if k < 2 || subjects.len() < k || subjects.len() - subjects.len().div_ceil(k) <= val_count {
        return Err(Error::Config(format!(
            "{} subjects cannot form {k} folds with {val_count} validation subjects",
            subjects.len()
        )));
    }
    let mut order: Vec<String> = subjects.to_vec();
    order.sort();
    order.shuffle(&mut rng::stream(seed, &[rng::hash_str("folds")]));
    let n = order.len();
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = n / k + usize::from(fold < n % k);
        let test: Vec<String> = order[start..start + size].to_vec();
        let mut rest: Vec<String> = order[..start].iter().chain(&order[start + size..]).cloned().collect();
        rest.shuffle(&mut rng::stream(seed, &[rng::hash_str("val"), fold as u64]));
        let val = rest[..val_count].to_vec();
        let mut train = rest[val_count..].to_vec();
        train.sort();
        folds.push(FoldSplit {
            fold,
            train,
            val,
            test,
        });
        start += size;
    }
    Ok(folds)
}

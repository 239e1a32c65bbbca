//! Bookkeeping of which sample ids are labeled, unlabeled, or held out.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of dataset ids. All four lists are kept in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePool {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Ids promoted in each round, in selection order.
    pub history: Vec<Vec<usize>>,
}

impl SamplePool {
    pub fn new(mut labeled: Vec<usize>, mut unlabeled: Vec<usize>, mut val: Vec<usize>, mut test: Vec<usize>) -> Result<Self> {
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let pool = SamplePool {
            labeled,
            unlabeled,
            val,
            test,
            history: Vec::new(),
        };
        pool.check()?;
        Ok(pool)
    }

    /// Every id that was ever in the labeled or unlabeled partition.
    pub fn train_ids(&self) -> BTreeSet<usize> {
        self.labeled.iter().chain(&self.unlabeled).copied().collect()
    }

    /// Moves `selected` from the unlabeled to the labeled partition and
    /// appends it to the history.
    pub fn promote(&mut self, selected: &[usize]) -> Result<()> {
        let set: BTreeSet<usize> = selected.iter().copied().collect();
        if set.len() != selected.len() {
            return Err(Error::Invariant(format!("duplicate ids in selection {selected:?}")));
        }
        if let Some(id) = set.iter().find(|id| self.unlabeled.binary_search(id).is_err()) {
            return Err(Error::Invariant(format!("selected id {id} is not unlabeled")));
        }
        self.unlabeled.retain(|id| !set.contains(id));
        self.labeled.extend(selected);
        self.labeled.sort_unstable();
        self.history.push(selected.to_vec());
        self.check()
    }

    /// Disjointness of all partitions, plus history consistency.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, ids) in [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::Invariant(format!("id {id} appears twice (seen again in {name})")));
                }
            }
        }
        let mut promoted = BTreeSet::new();
        for round in &self.history {
            for &id in round {
                if !promoted.insert(id) {
                    return Err(Error::Invariant(format!("id {id} selected in two rounds")));
                }
                if self.labeled.binary_search(&id).is_err() {
                    return Err(Error::Invariant(format!("promoted id {id} is not labeled")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> SamplePool {
        SamplePool::new(vec![3, 1], (4..10).collect(), vec![10, 11], vec![12]).unwrap()
    }

    #[test]
    fn promote_moves_ids() {
        let mut p = pool();
        let before = p.train_ids();
        p.promote(&[7, 5]).unwrap();
        assert_eq!(p.labeled, vec![1, 3, 5, 7]);
        assert_eq!(p.unlabeled, vec![4, 6, 8, 9]);
        assert_eq!(p.history, vec![vec![7, 5]]);
        assert_eq!(p.train_ids(), before);
    }

    #[test]
    fn promote_rejects_bad_selections() {
        let mut p = pool();
        assert!(matches!(p.promote(&[1]), Err(Error::Invariant(_))));
        assert!(matches!(p.promote(&[4, 4]), Err(Error::Invariant(_))));
        assert!(matches!(p.promote(&[11]), Err(Error::Invariant(_))));
        assert_eq!(p, pool());
    }

    #[test]
    fn overlapping_partitions_rejected() {
        assert!(SamplePool::new(vec![1], vec![1, 2], vec![], vec![]).is_err());
        assert!(SamplePool::new(vec![1], vec![2], vec![3], vec![3]).is_err());
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fold index per entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// Entries held out for validation in `fold`.
    pub fn held_out(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Entries trained on when `fold` is held out.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Shuffle the entries with `seed`, then deal them round-robin into `k` folds.
pub fn make_folds(entries: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be ≥ 2, got {k}")));
    }
    if k > entries {
        return Err(Error::Config(format!(
            "cannot split {entries} entries into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..entries).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; entries];
    for (pos, &entry) in order.iter().enumerate() {
        assignments[entry] = pos % k;
    }
    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_for_163_entries() {
        let mut sizes = make_folds(163, 4, 3).unwrap().fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![40, 41, 41, 41]);
    }

    #[test]
    fn deterministic_and_validated() {
        assert_eq!(make_folds(30, 4, 9).unwrap(), make_folds(30, 4, 9).unwrap());
        assert_eq!(make_folds(4, 4, 0).unwrap().fold_sizes(), vec![1; 4]);
        assert!(make_folds(3, 4, 0).is_err());
        assert!(make_folds(10, 1, 0).is_err());
    }
}

//! Seeded fold assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitMode {
    KFold(usize),
    /// One train/test split holding out the given fraction.
    Single(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    /// k-fold: the ids of each fold. Single split: `[train, test]`.
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Fold index of `id` (for a single split 0 is train and 1 is test).
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|x| x == id))
    }

    /// `(train, test)` id lists for each run the plan defines.
    pub fn partitions(&self) -> Vec<(Vec<String>, Vec<String>)> {
        match self.mode {
            SplitMode::Single(_) => vec![(self.folds[0].clone(), self.folds[1].clone())],
            SplitMode::KFold(_) => (0..self.folds.len())
                .map(|k| {
                    let train = self
                        .folds
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != k)
                        .flat_map(|(_, f)| f.iter().cloned())
                        .collect();
                    (train, self.folds[k].clone())
                })
                .collect(),
        }
    }
}

fn shuffled(ids: &[String], seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Shuffles the ids and deals them round-robin into `k` folds.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 || k > ids.len() {
        return Err(Error::config(
            "split.k",
            format!("need 2 <= k <= {} ids, got {k}", ids.len()),
        ));
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled(ids, seed).into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(SplitPlan {
        mode: SplitMode::KFold(k),
        seed,
        folds,
    })
}

/// Holds out `round(test_fraction · n)` shuffled ids (at least one of each side).
pub fn single_split(ids: &[String], test_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(0.0 < test_fraction && test_fraction < 1.0) || ids.len() < 2 {
        return Err(Error::config(
            "split.test_fraction",
            "need 0 < fraction < 1 and at least 2 ids",
        ));
    }
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut all = shuffled(ids, seed);
    let test = all.split_off(ids.len() - n_test);
    Ok(SplitPlan {
        mode: SplitMode::Single(test_fraction),
        seed,
        folds: vec![all, test],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn fold_sizes() {
        let p = kfold_split(&ids(10), 5, 0).unwrap();
        assert!(p.folds.iter().all(|f| f.len() == 2));
        let p = kfold_split(&ids(11), 5, 0).unwrap();
        let mut sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(kfold_split(&ids(3), 5, 0).is_err());
    }

    #[test]
    fn partitions_cover_everything() {
        let all = ids(13);
        let p = kfold_split(&all, 4, 9).unwrap();
        assert_eq!(p, kfold_split(&all, 4, 9).unwrap());
        for (train, test) in p.partitions() {
            assert_eq!(train.len() + test.len(), 13);
            assert!(test.iter().all(|t| !train.contains(t)));
        }
        let s = single_split(&all, 0.2, 1).unwrap();
        assert_eq!(s.folds[1].len(), 3);
        assert_eq!(s.partitions().len(), 1);
        assert_eq!(s.fold_of(&s.folds[1][0]), Some(1));
    }
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Record};

pub const DEFAULT_SUPPORT_N: usize = 50;
pub const DEFAULT_VALIDATION_N: usize = 50;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub support: Vec<Record>,
    pub validation: Vec<Record>,
    pub generation: Vec<Record>,
}

/// Seeded shuffle followed by contiguous assignment: the first `support_n`
/// shuffled records form the support set, the next `validation_n` the
/// validation set, and the remainder the generation set.
pub fn split_dataset(
    records: &[Record],
    support_n: usize,
    validation_n: usize,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let needed = support_n + validation_n;
    if needed > records.len() {
        return Err(DatasetError::InsufficientRecords {
            needed,
            available: records.len(),
        });
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let generation = shuffled.split_off(needed);
    let validation = shuffled.split_off(support_n);
    Ok(DatasetSplit {
        support: shuffled,
        validation,
        generation,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// An assignment over no records, used for empty generation sets.
    pub fn empty(k: usize) -> Self {
        Self {
            k,
            fold_of: BTreeMap::new(),
        }
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_of.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Ids of one fold, in id order.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Shuffles ids under `seed` and deals them round-robin into `k` folds.
pub fn kfold_split<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<FoldAssignment, DatasetError> {
    if k < 2 || ids.len() < k {
        return Err(DatasetError::TooFewRecords {
            k,
            available: ids.len(),
        });
    }
    let mut order: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = BTreeMap::new();
    for (i, id) in order.into_iter().enumerate() {
        if fold_of.insert(id.to_string(), i % k).is_some() {
            return Err(DatasetError::DuplicateId {
                id: id.to_string(),
                line: None,
            });
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;

    fn records(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| Record::raw_text(format!("r{i}"), format!("text {i}")))
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let recs = records(120);
        let a = split_dataset(&recs, 50, 50, 7).unwrap();
        assert_eq!((a.support.len(), a.validation.len(), a.generation.len()), (50, 50, 20));
        assert_eq!(a, split_dataset(&recs, 50, 50, 7).unwrap());
        assert_ne!(a, split_dataset(&recs, 50, 50, 8).unwrap());
    }

    #[test]
    fn split_insufficient() {
        assert!(matches!(
            split_dataset(&records(120), 200, 50, 0),
            Err(DatasetError::InsufficientRecords {
                needed: 250,
                available: 120
            })
        ));
    }

    #[test]
    fn fold_sizes() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        assert_eq!(kfold_split(&ids, 5, 1).unwrap().fold_sizes(), vec![2; 5]);
        let ids: Vec<String> = (0..11).map(|i| i.to_string()).collect();
        let mut sizes = kfold_split(&ids, 5, 1).unwrap().fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn kfold_rejects_bad_k() {
        assert!(matches!(
            kfold_split(&["a", "b"], 1, 0),
            Err(DatasetError::TooFewRecords { .. })
        ));
        assert!(matches!(
            kfold_split(&["a", "b"], 3, 0),
            Err(DatasetError::TooFewRecords { .. })
        ));
        assert!(matches!(
            kfold_split(&["a", "a"], 2, 0),
            Err(DatasetError::DuplicateId { .. })
        ));
    }
}

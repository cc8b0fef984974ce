//! Volunteer-disjoint dataset splitting.
//!
//! Test images must come from volunteers that contribute nothing to
//! training or validation; validation images are held out from the
//! training volunteers' pool.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::types::SampleId;

/// Sample ids partitioned into train, validation, and test sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SampleId>,
    pub val: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Splits `(id, volunteer)` pairs so that `n_test_volunteers` whole
/// volunteers form the test set and `n_val_images` images from the
/// remaining volunteers form the validation set.
///
/// Selection is seeded and deterministic: volunteers are considered in
/// sorted order before shuffling, and image order within each output
/// set follows input order. Draws happen in a fixed sequence (test
/// volunteers first, then validation images), so equal inputs and seed
/// always produce the identical split.
pub fn split_by_volunteer(
    items: &[(SampleId, u32)],
    n_test_volunteers: usize,
    n_val_images: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut volunteers: Vec<u32> = items.iter().map(|(_, v)| *v).collect();
    volunteers.sort_unstable();
    volunteers.dedup();
    if n_test_volunteers >= volunteers.len() {
        return Err(CoreError::invalid(
            "split",
            format!(
                "{} test volunteers requested but only {} volunteers present",
                n_test_volunteers,
                volunteers.len()
            ),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = volunteers.clone();
    pool.shuffle(&mut rng);
    let mut test_volunteers: Vec<u32> = pool[..n_test_volunteers].to_vec();
    test_volunteers.sort_unstable();

    let is_test = |v: u32| test_volunteers.binary_search(&v).is_ok();
    let test: Vec<SampleId> = items
        .iter()
        .filter(|(_, v)| is_test(*v))
        .map(|(id, _)| id.clone())
        .collect();
    let remaining: Vec<&SampleId> = items
        .iter()
        .filter(|(_, v)| !is_test(*v))
        .map(|(id, _)| id)
        .collect();

    if n_val_images > remaining.len() {
        return Err(CoreError::invalid(
            "split",
            format!(
                "{} validation images requested but only {} non-test images present",
                n_val_images,
                remaining.len()
            ),
        ));
    }

    let mut idx: Vec<usize> = (0..remaining.len()).collect();
    idx.shuffle(&mut rng);
    let mut val_idx: Vec<usize> = idx[..n_val_images].to_vec();
    val_idx.sort_unstable();

    let mut val = Vec::with_capacity(n_val_images);
    let mut train = Vec::with_capacity(remaining.len() - n_val_images);
    let mut next_val = val_idx.iter().peekable();
    for (i, id) in remaining.into_iter().enumerate() {
        if next_val.peek() == Some(&&i) {
            val.push(id.clone());
            next_val.next();
        } else {
            train.push(id.clone());
        }
    }

    Ok(DatasetSplit { train, val, test })
}

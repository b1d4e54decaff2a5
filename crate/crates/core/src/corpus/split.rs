use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::encode::ProcessedFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Binary ids per split plus the seed that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn assignment(&self) -> BTreeMap<&str, Split> {
        let mut m = BTreeMap::new();
        for (split, ids) in [(Split::Train, &self.train), (Split::Valid, &self.valid), (Split::Test, &self.test)] {
            for id in ids {
                m.insert(id.as_str(), split);
            }
        }
        m
    }
}

/// Assigns whole binaries to splits. Ids are sorted, shuffled with a seeded
/// ChaCha stream, and cut at rounded ratio boundaries.
pub fn split_per_binary<'a>(binary_ids: impl IntoIterator<Item = &'a str>, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let unique: BTreeSet<&str> = binary_ids.into_iter().collect();
    let mut ids: Vec<String> = unique.into_iter().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut test = ids.split_off(n_train + n_valid);
    let mut valid = ids.split_off(n_train);
    let mut train = ids;
    train.sort();
    valid.sort();
    test.sort();
    Ok(SplitManifest {
        seed,
        ratios,
        train,
        valid,
        test,
    })
}

/// Flags each function whose body hash also occurs in the training split.
pub fn mark_function_in_training(test_split: &[ProcessedFunction], train_split: &[ProcessedFunction]) -> Vec<bool> {
    let seen: HashSet<&str> = train_split.iter().map(|f| f.body_hash.as_str()).collect();
    test_split.iter().map(|f| seen.contains(f.body_hash.as_str())).collect()
}

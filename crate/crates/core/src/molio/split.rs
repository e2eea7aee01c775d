use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..corpus_size` and cuts it by `ratios` (train, val, test).
///
/// Val and test sizes are `floor(ratio * size)`; the remainder goes to train.
pub fn split_dataset(corpus_size: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidArgument(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios sum to {total}, expected 1")));
    }
    let mut idx: Vec<usize> = (0..corpus_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = |r: f64| ((r * corpus_size as f64) + 1e-9).floor() as usize;
    let n_val = cut(ratios[1]);
    let n_test = cut(ratios[2]).min(corpus_size - n_val);
    let n_train = corpus_size - n_val - n_test;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(DatasetSplit {
        train: idx,
        val,
        test,
        seed,
    })
}

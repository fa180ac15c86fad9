use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Document indices of one train/validation partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded `k`-fold partition of `n` documents; fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Contract(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Contract(format!("k = {k} folds exceeds {n} documents")));
    }
    let order = shuffled(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let validation = order[start..start + size].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(folds)
}

/// Seeded single split holding out `test_fraction` of `n` documents (rounded down).
pub fn holdout(n: usize, test_fraction: f64, seed: u64) -> Result<Fold> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Contract(format!("hold-out fraction {test_fraction} not in [0,1)")));
    }
    let test = (n as f64 * test_fraction).floor() as usize;
    if test == 0 || test == n {
        return Err(Error::Contract(format!("hold-out of {test} from {n} documents")));
    }
    let order = shuffled(n, seed);
    Ok(Fold {
        validation: order[..test].to_vec(),
        train: order[test..].to_vec(),
    })
}

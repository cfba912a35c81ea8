//! Category-stratified fold and hold-out splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample indices of one train/validation/test partition, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Every `VAL_PERIOD`-th remaining sample goes to validation (a 90/10 split).
const VAL_PERIOD: usize = 10;

fn by_category(categories: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = categories.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &c) in categories.iter().enumerate() {
        groups[c].push(i);
    }
    for g in &mut groups {
        for i in (1..g.len()).rev() {
            let j = rng.random_range(0..=i);
            g.swap(i, j);
        }
    }
    groups
}

/// Deals each category's shuffled samples round-robin into `n_folds` test
/// folds. The starting fold rotates with the running sample count so fold sizes
/// stay balanced as well. The remainder of each fold is split 90/10 into
/// train and validation, again per category.
pub fn split_folds(categories: &[usize], n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds < 2 {
        return Err(Error::config(format!("n_folds must be at least 2, got {n_folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = by_category(categories, &mut rng);
    for (c, g) in groups.iter().enumerate() {
        if g.len() < n_folds {
            return Err(Error::config(format!(
                "category {c} has {} samples, fewer than {n_folds} folds",
                g.len()
            )));
        }
    }
    let mut fold_of = vec![0; categories.len()];
    let mut offset = 0;
    for g in &groups {
        for (j, &i) in g.iter().enumerate() {
            fold_of[i] = (j + offset) % n_folds;
        }
        offset += g.len();
    }
    let folds = (0..n_folds)
        .map(|f| {
            let mut fold = Fold {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            let mut offset = 0;
            for g in &groups {
                let rest: Vec<usize> = g.iter().copied().filter(|&i| fold_of[i] != f).collect();
                for (j, &i) in rest.iter().enumerate() {
                    if (j + offset) % VAL_PERIOD == 0 {
                        fold.val.push(i);
                    } else {
                        fold.train.push(i);
                    }
                }
                offset += rest.len();
                fold.test.extend(g.iter().copied().filter(|&i| fold_of[i] == f));
            }
            fold.train.sort_unstable();
            fold.val.sort_unstable();
            fold.test.sort_unstable();
            fold
        })
        .collect();
    Ok(folds)
}

/// Takes `val_per_category` and `test_per_category` random samples from every
/// category; the rest is training data.
pub fn split_holdout(categories: &[usize], val_per_category: usize, test_per_category: usize, seed: u64) -> Result<Fold> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = by_category(categories, &mut rng);
    let mut fold = Fold {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, g) in groups.iter().enumerate() {
        if g.len() <= val_per_category + test_per_category {
            return Err(Error::config(format!(
                "category {c} has {} samples, not enough for {val_per_category} validation + {test_per_category} test and a training share",
                g.len()
            )));
        }
        fold.test.extend(&g[..test_per_category]);
        fold.val.extend(&g[test_per_category..test_per_category + val_per_category]);
        fold.train.extend(&g[test_per_category + val_per_category..]);
    }
    fold.train.sort_unstable();
    fold.val.sort_unstable();
    fold.test.sort_unstable();
    Ok(fold)
}

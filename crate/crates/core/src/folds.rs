use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

/// Balanced random partition of `0..n` into `k` folds labelled `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldSpec {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Rows of the estimation sample for fold `fold` (1-based).
    pub fn estimation(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    /// Rows of the parameter-generating sample (complement of the fold).
    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f - 1] += 1;
        }
        s
    }
}

pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSpec> {
    if k < 2 {
        return Err(invalid(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(invalid(format!("cannot split {n} rows into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k + 1;
    }
    Ok(FoldSpec { k, assignment, seed })
}

use ndarray::ArrayView2;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, TreeParams};
use crate::error::{invalid, Result};
use crate::par::{map_indexed, Parallelism};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Fraction of features considered at each split.
    pub feature_fraction: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 50, feature_fraction: 0.34, max_depth: 8, min_leaf: 5 }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(invalid("forest needs at least one tree"));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(invalid("feature_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Bagged CART trees with per-split feature subsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<RegressionTree>,
}

impl RandomForest {
    pub fn fit(
        x: ArrayView2<'_, f64>,
        target: &[f64],
        params: &ForestParams,
        seed: u64,
        par: Parallelism,
    ) -> Result<Self> {
        params.validate()?;
        let n = x.nrows();
        if n == 0 {
            return Err(invalid("cannot fit a forest on zero rows"));
        }
        let p = x.ncols();
        let m = ((p as f64 * params.feature_fraction).ceil() as usize).clamp(1, p.max(1));
        let tp = TreeParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf.max(2),
            alpha: None,
            bonferroni: false,
            max_features: Some(m),
            ..TreeParams::default()
        };
        let trees = map_indexed(par, params.n_trees, |t| {
            let mut r = rng::stream(seed, t as u64);
            let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            RegressionTree::fit_rows(x, target, &rows, &tp, Some(&mut r))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(RandomForest { trees })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut out = vec![0.0; x.nrows()];
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict(x)) {
                *o += v;
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

//! Regression learners behind one fit/predict contract.
//!
//! Every learner fits `y` on a feature matrix with an optional offset. For the
//! identity family the offset is subtracted before fitting and added back at
//! prediction time; for the logistic family it enters the linear predictor.

pub mod forest;
pub mod glm;
pub mod lasso;
pub mod nnls;
pub mod super_learner;
pub mod tree;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Parallelism;

pub use forest::{ForestParams, RandomForest};
pub use glm::{expit, fit_glm, logit, GlmFit, GlmOptions};
pub use lasso::{fit_penalized_glm, PenalizedFit, PenaltyParams};
pub use super_learner::{super_learn, SlMode, SuperLearner};
pub use tree::{RegressionTree, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Identity,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    /// Intercept-only model.
    Mean,
    Glm,
    RegressionTree(TreeParams),
    PenalizedGlm(PenaltyParams),
    RandomForest(ForestParams),
}

impl LearnerSpec {
    pub fn label(&self) -> String {
        match self {
            LearnerSpec::Mean => "mean".into(),
            LearnerSpec::Glm => "glm".into(),
            LearnerSpec::RegressionTree(t) => format!(
                "tree(depth={},min_leaf={},alpha={})",
                t.max_depth,
                t.min_leaf,
                t.alpha.map_or("none".to_string(), |a| a.to_string())
            ),
            LearnerSpec::PenalizedGlm(p) => format!("penalized_glm(mix={})", p.mix),
            LearnerSpec::RandomForest(f) => format!("random_forest(trees={})", f.n_trees),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LearnerSpec::Mean | LearnerSpec::Glm => Ok(()),
            LearnerSpec::RegressionTree(t) => t.validate(),
            LearnerSpec::PenalizedGlm(p) => p.validate(),
            LearnerSpec::RandomForest(f) => f.validate(),
        }
    }
}

/// Library used for outcome and propensity regressions unless configured otherwise.
pub fn default_library() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::Glm,
        LearnerSpec::RegressionTree(TreeParams { max_depth: 3, min_leaf: 10, alpha: None, ..TreeParams::default() }),
        LearnerSpec::RandomForest(ForestParams::default()),
        LearnerSpec::PenalizedGlm(PenaltyParams::default()),
    ]
}

/// Tree library for single-exposure threshold search: a grid over depth,
/// leaf size, significance level and Bonferroni adjustment.
pub fn default_tree_library() -> Vec<LearnerSpec> {
    let mk = |max_depth, min_leaf, alpha, bonferroni| {
        LearnerSpec::RegressionTree(TreeParams {
            max_depth,
            min_leaf,
            alpha: Some(alpha),
            bonferroni,
            ..TreeParams::default()
        })
    };
    vec![
        mk(1, 10, 0.05, true),
        mk(2, 10, 0.05, true),
        mk(2, 20, 0.01, true),
        mk(3, 10, 0.05, true),
        mk(3, 20, 0.05, false),
        mk(2, 30, 0.1, true),
        mk(3, 30, 0.01, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    /// Constant on the link scale.
    Constant { family: Family, value: f64 },
    Glm(GlmFit),
    Penalized(PenalizedFit),
    Tree { family: Family, tree: RegressionTree },
    Forest { family: Family, forest: RandomForest },
}

impl FittedModel {
    pub fn family(&self) -> Family {
        match self {
            FittedModel::Constant { family, .. }
            | FittedModel::Tree { family, .. }
            | FittedModel::Forest { family, .. } => *family,
            FittedModel::Glm(g) => g.family,
            FittedModel::Penalized(p) => p.family,
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, offset: Option<&[f64]>) -> Vec<f64> {
        let n = x.nrows();
        let add_offset = |mut base: Vec<f64>, family: Family| -> Vec<f64> {
            match (family, offset) {
                (Family::Identity, Some(o)) => {
                    base.iter_mut().zip(o).for_each(|(b, o)| *b += o);
                    base
                }
                (Family::Logistic, Some(o)) => base
                    .into_iter()
                    .zip(o)
                    .map(|(p, o)| expit(logit(p.clamp(1e-9, 1.0 - 1e-9)) + o))
                    .collect(),
                (_, None) => base,
            }
        };
        match self {
            FittedModel::Constant { family, value } => {
                let o = |i: usize| offset.map_or(0.0, |o| o[i]);
                match family {
                    Family::Identity => (0..n).map(|i| value + o(i)).collect(),
                    Family::Logistic => (0..n).map(|i| expit(value + o(i))).collect(),
                }
            }
            FittedModel::Glm(g) => g.predict(x, offset),
            FittedModel::Penalized(p) => p.predict(x, offset),
            FittedModel::Tree { family, tree } => add_offset(tree.predict(x), *family),
            FittedModel::Forest { family, forest } => add_offset(forest.predict(x), *family),
        }
    }

    pub fn as_tree(&self) -> Option<&RegressionTree> {
        match self {
            FittedModel::Tree { tree, .. } => Some(tree),
            _ => None,
        }
    }
}

pub fn fit_learner(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    family: Family,
    seed: u64,
    par: Parallelism,
) -> Result<FittedModel> {
    spec.validate()?;
    let n = x.nrows();
    if y.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::InvalidArgument("learner input lengths differ".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("learner needs at least one row".into()));
    }
    let residual = || -> Vec<f64> {
        match offset {
            Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
            None => y.to_vec(),
        }
    };
    let tree_like_offset_check = || -> Result<()> {
        if family == Family::Logistic && offset.is_some() {
            return Err(Error::Learner("tree learners do not accept a logistic offset".into()));
        }
        Ok(())
    };
    match spec {
        LearnerSpec::Mean => {
            let value = match family {
                Family::Identity => residual().iter().sum::<f64>() / n as f64,
                Family::Logistic => {
                    let empty = ndarray::Array2::<f64>::zeros((n, 0));
                    let g = fit_glm(empty.view(), y, offset, family, None, &GlmOptions::default())?;
                    g.coef[0]
                }
            };
            Ok(FittedModel::Constant { family, value })
        }
        LearnerSpec::Glm => Ok(FittedModel::Glm(fit_glm(x, y, offset, family, None, &GlmOptions::default())?)),
        LearnerSpec::PenalizedGlm(p) => Ok(FittedModel::Penalized(fit_penalized_glm(x, y, offset, family, p, seed, par)?)),
        LearnerSpec::RegressionTree(p) => {
            tree_like_offset_check()?;
            let tree = RegressionTree::fit(x, &residual(), p)?;
            Ok(FittedModel::Tree { family, tree })
        }
        LearnerSpec::RandomForest(p) => {
            tree_like_offset_check()?;
            let forest = RandomForest::fit(x, &residual(), p, seed, par)?;
            Ok(FittedModel::Forest { family, forest })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_round_trips_through_json() {
        let lib = default_library();
        let s = serde_json::to_string(&lib).unwrap();
        let back: Vec<LearnerSpec> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, lib);
        let parsed: LearnerSpec = serde_json::from_str(r#"{"kind":"regression_tree","max_depth":2}"#).unwrap();
        assert!(matches!(parsed, LearnerSpec::RegressionTree(TreeParams { max_depth: 2, .. })));
    }

    #[test]
    fn identity_offset_is_added_back() {
        let x = ndarray::Array2::<f64>::zeros((3, 1));
        let y = [1.0, 2.0, 3.0];
        let off = [1.0, 2.0, 3.0];
        let m = fit_learner(&LearnerSpec::Mean, x.view(), &y, Some(&off), Family::Identity, 0, Parallelism::Sequential).unwrap();
        assert_eq!(m.predict(x.view(), Some(&off)), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn invalid_tree_params_rejected() {
        let bad = LearnerSpec::RegressionTree(TreeParams { min_leaf: 1, ..TreeParams::default() });
        assert!(bad.validate().is_err());
        let bad = LearnerSpec::PenalizedGlm(PenaltyParams { lambdas: Some(vec![0.1, 0.2]), ..PenaltyParams::default() });
        assert!(bad.validate().is_err());
    }
}

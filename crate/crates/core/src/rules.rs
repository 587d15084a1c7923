//! Rule-ensemble region discovery over the joint exposure space.
//!
//! Shallow trees (half bagged, half boosted) are grown on the exposure-side
//! target; every non-root node path becomes a candidate rule. A lasso on the
//! rule indicators keeps the informative ones, and the strongest rule per
//! variable set is the region reported for that set.

use std::collections::{BTreeMap, HashSet};

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::learners::lasso::{fit_penalized_glm, PenalizedFit, PenaltyParams};
use crate::learners::tree::{RegressionTree, TreeParams};
use crate::learners::Family;
use crate::par::{map_indexed, Parallelism};
use crate::region::RectRegion;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleEnsembleConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Distinct exposures allowed in one rule.
    pub max_vars: usize,
    pub min_leaf: usize,
    /// Ensemble-wide split significance; each tree uses `alpha / n_trees`.
    pub alpha: Option<f64>,
    pub subsample: f64,
    pub feature_fraction: f64,
    pub learning_rate: f64,
    pub penalty: PenaltyParams,
}

impl Default for RuleEnsembleConfig {
    fn default() -> Self {
        RuleEnsembleConfig {
            n_trees: 50,
            max_depth: 3,
            max_vars: 3,
            min_leaf: 10,
            alpha: Some(0.05),
            subsample: 0.7,
            feature_fraction: 0.67,
            learning_rate: 0.1,
            penalty: PenaltyParams::default(),
        }
    }
}

impl RuleEnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.max_vars == 0 {
            return Err(invalid("rule ensemble needs n_trees, max_depth and max_vars ≥ 1"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(invalid("subsample must lie in (0, 1]"));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(invalid("feature_fraction must lie in (0, 1]"));
        }
        self.penalty.validate()
    }

    fn tree_params(&self, p: usize) -> TreeParams {
        let m = ((p as f64 * self.feature_fraction).ceil() as usize).clamp(1, p.max(1));
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf.max(2),
            alpha: self.alpha.map(|a| a / self.n_trees as f64),
            bonferroni: true,
            max_features: Some(m),
            ..TreeParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub region: RectRegion,
    pub tree_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleCandidate {
    pub region: RectRegion,
    pub tree_id: usize,
    pub coefficient: f64,
    pub varset: Vec<String>,
    /// Training rows covered by the rule.
    pub coverage: usize,
}

/// Lasso fit on a fixed set of rule indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleModel {
    pub candidates: Vec<Candidate>,
    pub fit: PenalizedFit,
}

impl RuleModel {
    pub fn predict(&self, a: ArrayView2<'_, f64>, names: &[String]) -> Result<Vec<f64>> {
        let x = rule_design(&self.candidates, a, names)?;
        Ok(self.fit.predict(x.view(), None))
    }

    /// Rules with nonzero coefficients.
    pub fn selected(&self, a: ArrayView2<'_, f64>, names: &[String]) -> Result<Vec<RuleCandidate>> {
        let mut out = Vec::new();
        for j in self.fit.nonzero() {
            let c = &self.candidates[j];
            let coverage = c.region.evaluate(a, names)?.iter().filter(|&&b| b).count();
            out.push(RuleCandidate {
                region: c.region.clone(),
                tree_id: c.tree_id,
                coefficient: self.fit.coef[j],
                varset: c.region.varset(),
                coverage,
            });
        }
        Ok(out)
    }
}

/// Indicator design matrix, one column per candidate.
pub fn rule_design(cands: &[Candidate], a: ArrayView2<'_, f64>, names: &[String]) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((a.nrows(), cands.len()));
    for (j, c) in cands.iter().enumerate() {
        for (i, b) in c.region.evaluate(a, names)?.into_iter().enumerate() {
            if b {
                x[[i, j]] = 1.0;
            }
        }
    }
    Ok(x)
}

pub fn generate_candidate_rules(
    a: ArrayView2<'_, f64>,
    names: &[String],
    target: &[f64],
    cfg: &RuleEnsembleConfig,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let n = a.nrows();
    if target.len() != n || names.len() != a.ncols() {
        return Err(invalid("rule generation: shape mismatch"));
    }
    let tp = cfg.tree_params(a.ncols());
    let m = ((n as f64 * cfg.subsample).round() as usize).clamp(1, n);
    let n_bag = cfg.n_trees.div_ceil(2);
    let n_boost = cfg.n_trees - n_bag;

    let subsample = |t: usize| -> (Vec<usize>, rand_chacha::ChaCha8Rng) {
        let mut r = rng::stream(seed, t as u64);
        let mut rows = index::sample(&mut r, n, m).into_vec();
        rows.sort_unstable();
        (rows, r)
    };

    let mut trees: Vec<RegressionTree> = map_indexed(par, n_bag, |t| {
        let (rows, mut r) = subsample(t);
        RegressionTree::fit_rows(a, target, &rows, &tp, Some(&mut r))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mean = target.iter().sum::<f64>() / n as f64;
    let mut fitted = vec![mean; n];
    for t in n_bag..n_bag + n_boost {
        let resid: Vec<f64> = target.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let (rows, mut r) = subsample(t);
        let tree = RegressionTree::fit_rows(a, &resid, &rows, &tp, Some(&mut r))?;
        if tree.n_leaves() == 1 {
            break;
        }
        for (f, p) in fitted.iter_mut().zip(tree.predict(a)) {
            *f += cfg.learning_rate * p;
        }
        trees.push(tree);
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (tree_id, tree) in trees.iter().enumerate() {
        for (_, region) in tree.node_regions(names) {
            if region.varset().len() > cfg.max_vars {
                continue;
            }
            if seen.insert(region.canonical()) {
                out.push(Candidate { region, tree_id });
            }
        }
    }
    Ok(out)
}

/// Lasso over the candidate indicators; `penalty` may pin a single λ.
pub fn fit_rule_model(
    candidates: Vec<Candidate>,
    a: ArrayView2<'_, f64>,
    names: &[String],
    target: &[f64],
    penalty: &PenaltyParams,
    seed: u64,
    par: Parallelism,
) -> Result<RuleModel> {
    if candidates.is_empty() {
        return Err(invalid("no candidate rules to select from"));
    }
    let x = rule_design(&candidates, a, names)?;
    let fit = fit_penalized_glm(x.view(), target, None, Family::Identity, penalty, seed, par)?;
    Ok(RuleModel { candidates, fit })
}

pub fn select_rules(
    candidates: Vec<Candidate>,
    a: ArrayView2<'_, f64>,
    names: &[String],
    target: &[f64],
    penalty: &PenaltyParams,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<RuleCandidate>> {
    let model = fit_rule_model(candidates, a, names, target, penalty, seed, par)?;
    model.selected(a, names)
}

/// Strongest rule per variable set (keyed by the `-`-joined sorted names).
pub fn best_rule_per_varset(selected: &[RuleCandidate], direction: Direction) -> BTreeMap<String, RuleCandidate> {
    let mut out: BTreeMap<String, RuleCandidate> = BTreeMap::new();
    for c in selected {
        let key = c.varset.join("-");
        let better = match out.get(&key) {
            None => true,
            Some(cur) => {
                let by_coef = match direction {
                    Direction::Max => c.coefficient.total_cmp(&cur.coefficient),
                    Direction::Min => cur.coefficient.total_cmp(&c.coefficient),
                };
                by_coef
                    .then(c.coverage.cmp(&cur.coverage))
                    .then_with(|| cur.region.canonical().cmp(&c.region.canonical()))
                    .is_gt()
            }
        };
        if better {
            out.insert(key, c.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::Clause;
    use rand::RngExt;

    fn names() -> Vec<String> {
        vec!["A1".into(), "A2".into()]
    }

    fn rc(var: &[&str], cut: f64, coef: f64, coverage: usize) -> RuleCandidate {
        let region = RectRegion::new(var.iter().map(|v| Clause::at_least(*v, cut)).collect()).unwrap();
        RuleCandidate { varset: region.varset(), region, tree_id: 0, coefficient: coef, coverage }
    }

    #[test]
    fn max_coefficient_wins() {
        let sel = vec![rc(&["X1", "X2"], 1.0, 1.2, 10), rc(&["X1", "X2"], 2.0, 0.4, 50)];
        let best = best_rule_per_varset(&sel, Direction::Max);
        assert_eq!(best["X1-X2"].coefficient, 1.2);
    }

    #[test]
    fn min_direction() {
        let sel = vec![rc(&["X1"], 1.0, -2.0, 10), rc(&["X1"], 2.0, 3.0, 10)];
        assert_eq!(best_rule_per_varset(&sel, Direction::Min)["X1"].coefficient, -2.0);
    }

    #[test]
    fn disjoint_varsets_kept_and_ties_use_coverage() {
        let sel = vec![rc(&["X1"], 1.0, 1.0, 5), rc(&["X1"], 2.0, 1.0, 9), rc(&["X2"], 1.0, 0.5, 1)];
        let best = best_rule_per_varset(&sel, Direction::Max);
        assert_eq!(best.len(), 2);
        assert_eq!(best["X1"].coverage, 9);
    }

    #[test]
    fn single_shallow_tree_bounds_candidates() {
        let mut r = rng::seeded(1);
        let a = Array2::from_shape_fn((200, 2), |_| r.random::<f64>());
        let y: Vec<f64> = (0..200).map(|i| (a[[i, 0]] > 0.5) as u8 as f64 * 3.0).collect();
        let cfg = RuleEnsembleConfig { n_trees: 1, max_depth: 1, ..RuleEnsembleConfig::default() };
        let c = generate_candidate_rules(a.view(), &names(), &y, &cfg, 1, Parallelism::Sequential).unwrap();
        assert!(!c.is_empty() && c.len() <= 2);
    }

    #[test]
    fn perfectly_predictive_rule_selected() {
        let mut r = rng::seeded(2);
        let n = 300;
        let a = Array2::from_shape_fn((n, 2), |_| r.random::<f64>());
        let truth = RectRegion::new(vec![Clause::at_least("A1", 0.6), Clause::at_least("A2", 0.5)]).unwrap();
        let ind = truth.evaluate(a.view(), &names()).unwrap();
        let y: Vec<f64> = ind.iter().map(|&b| if b { 2.0 } else { 0.0 }).collect();
        let mut cands = vec![Candidate { region: truth.clone(), tree_id: 0 }];
        for k in 0..8 {
            let cut = 0.1 * k as f64 + 0.05;
            let noise = RectRegion::new(vec![Clause::less_than("A2", cut)]).unwrap();
            cands.push(Candidate { region: noise, tree_id: k + 1 });
        }
        let sel = select_rules(cands, a.view(), &names(), &y, &PenaltyParams::default(), 3, Parallelism::Sequential).unwrap();
        let best = best_rule_per_varset(&sel, Direction::Max);
        assert_eq!(best["A1-A2"].region, truth);
    }

    #[test]
    fn huge_lambda_selects_nothing() {
        let mut r = rng::seeded(3);
        let a = Array2::from_shape_fn((100, 2), |_| r.random::<f64>());
        let y: Vec<f64> = (0..100).map(|i| a[[i, 0]]).collect();
        let cands = vec![Candidate { region: RectRegion::new(vec![Clause::at_least("A1", 0.5)]).unwrap(), tree_id: 0 }];
        let p = PenaltyParams { lambdas: Some(vec![1e6]), ..PenaltyParams::default() };
        assert!(select_rules(cands, a.view(), &names(), &y, &p, 0, Parallelism::Sequential).unwrap().is_empty());
    }

    #[test]
    fn noise_target_yields_few_candidates() {
        let mut counts: Vec<usize> = (0..100u64)
            .map(|rep| {
                let mut r = rng::stream(500, rep);
                let a = Array2::from_shape_fn((200, 2), |_| r.random::<f64>());
                let y: Vec<f64> = (0..200).map(|_| r.random::<f64>()).collect();
                let cfg = RuleEnsembleConfig { n_trees: 20, ..RuleEnsembleConfig::default() };
                generate_candidate_rules(a.view(), &names(), &y, &cfg, rep, Parallelism::Sequential).unwrap().len()
            })
            .collect();
        counts.sort_unstable();
        assert_eq!(counts[50], 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn candidates_respect_depth_and_var_limits(seed in 0u64..1000, depth in 1usize..4, max_vars in 1usize..3) {
                let mut r = rng::stream(seed, 0);
                let a = Array2::from_shape_fn((150, 2), |_| r.random_range(0..6) as f64);
                let y: Vec<f64> = (0..150).map(|i| a[[i, 0]] * a[[i, 1]] + r.random::<f64>()).collect();
                let cfg = RuleEnsembleConfig { n_trees: 8, max_depth: depth, max_vars, alpha: None, ..RuleEnsembleConfig::default() };
                let cands = generate_candidate_rules(a.view(), &names(), &y, &cfg, seed, Parallelism::Sequential).unwrap();
                for c in &cands {
                    prop_assert!(c.region.varset().len() <= depth.min(max_vars));
                }
            }

            #[test]
            fn best_rule_holds_the_extreme_coefficient(coefs in proptest::collection::vec((0usize..3, -5.0f64..5.0), 1..20)) {
                let vars = [&["X1"][..], &["X2"][..], &["X1", "X2"][..]];
                let sel: Vec<RuleCandidate> = coefs.iter().enumerate().map(|(i, &(v, c))| rc(vars[v], i as f64, c, 1)).collect();
                let best = best_rule_per_varset(&sel, Direction::Max);
                for (key, b) in &best {
                    let max = sel.iter().filter(|c| c.varset.join("-") == *key).map(|c| c.coefficient).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(b.coefficient, max);
                }
                let keys: HashSet<String> = sel.iter().map(|c| c.varset.join("-")).collect();
                prop_assert_eq!(keys.len(), best.len());
            }
        }
    }

    #[test]
    fn duplicated_candidates_keep_predictions() {
        let mut r = rng::stream(77, 0);
        let a = Array2::from_shape_fn((200, 2), |_| r.random_range(0..6) as f64);
        let y: Vec<f64> = (0..200).map(|i| 2.0 * f64::from(u8::from(a[[i, 0]] >= 3.0 && a[[i, 1]] >= 3.0)) + r.random::<f64>()).collect();
        let cfg = RuleEnsembleConfig { n_trees: 10, ..RuleEnsembleConfig::default() };
        let cands = generate_candidate_rules(a.view(), &names(), &y, &cfg, 5, Parallelism::Sequential).unwrap();
        assert!(!cands.is_empty());
        let mut doubled = cands.clone();
        doubled.extend(cands.iter().cloned());
        let p = PenaltyParams::default();
        let once = fit_rule_model(cands, a.view(), &names(), &y, &p, 3, Parallelism::Sequential).unwrap();
        let twice = fit_rule_model(doubled, a.view(), &names(), &y, &p, 3, Parallelism::Sequential).unwrap();
        let p1 = once.predict(a.view(), &names()).unwrap();
        let p2 = twice.predict(a.view(), &names()).unwrap();
        for (u, v) in p1.iter().zip(&p2) {
            assert!((u - v).abs() < 1e-3, "{u} vs {v}");
        }
    }
}

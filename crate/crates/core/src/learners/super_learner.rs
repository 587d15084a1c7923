//! Cross-validated selection (discrete) or convex stacking of a learner library.

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{fit_learner, Family, FittedModel, LearnerSpec};
use crate::error::{invalid, Error, Result};
use crate::folds::kfold_split;
use crate::par::{map_indexed, Parallelism};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlMode {
    #[default]
    Discrete,
    Convex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperLearner {
    pub library: Vec<LearnerSpec>,
    pub mode: SlMode,
    pub family: Family,
    pub v: usize,
    /// `None` for learners dropped after failing on some fold.
    pub cv_risks: Vec<Option<f64>>,
    /// Non-negative, sums to 1; one-hot in discrete mode.
    pub weights: Vec<f64>,
    pub selected: Option<usize>,
    pub fits: Vec<Option<FittedModel>>,
    pub warnings: Vec<String>,
}

impl SuperLearner {
    pub fn predict(&self, x: ArrayView2<'_, f64>, offset: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; x.nrows()];
        for (w, fit) in self.weights.iter().zip(&self.fits) {
            if *w == 0.0 {
                continue;
            }
            if let Some(f) = fit {
                for (o, p) in out.iter_mut().zip(f.predict(x, offset)) {
                    *o += w * p;
                }
            }
        }
        out
    }

    /// The single model carrying all the weight, if any.
    pub fn winner(&self) -> Option<&FittedModel> {
        let i = self.weights.iter().position(|&w| w == 1.0)?;
        self.fits[i].as_ref()
    }

    pub fn cv_risk(&self) -> Option<f64> {
        self.selected.and_then(|i| self.cv_risks[i])
    }
}

#[allow(clippy::too_many_arguments)]
pub fn super_learn(
    library: &[LearnerSpec],
    x: ArrayView2<'_, f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    v: usize,
    mode: SlMode,
    family: Family,
    seed: u64,
    par: Parallelism,
) -> Result<SuperLearner> {
    if library.is_empty() {
        return Err(invalid("super learner library is empty"));
    }
    if v < 2 {
        return Err(invalid("super learner needs at least 2 folds"));
    }
    let n = x.nrows();
    if y.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(invalid("super learner input lengths differ"));
    }
    let n_learn = library.len();
    let mut warnings = Vec::new();

    // Out-of-fold predictions per learner; None if the learner failed anywhere.
    let cv_preds: Vec<Option<Vec<f64>>> = if n_learn == 1 {
        vec![None]
    } else {
        let v = v.min(n);
        let folds = kfold_split(n, v, seed)?;
        let jobs = map_indexed(par, n_learn * v, |job| {
            let (l, f) = (job / v, job % v);
            let train = folds.training(f + 1);
            let test = folds.estimation(f + 1);
            let xt = x.select(Axis(0), &train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let ot: Option<Vec<f64>> = offset.map(|o| train.iter().map(|&i| o[i]).collect());
            let xv = x.select(Axis(0), &test);
            let ov: Option<Vec<f64>> = offset.map(|o| test.iter().map(|&i| o[i]).collect());
            let fit = fit_learner(
                &library[l],
                xt.view(),
                &yt,
                ot.as_deref(),
                family,
                derive_seed(seed, job as u64 + 1),
                Parallelism::Sequential,
            )?;
            Ok::<_, Error>((test, fit.predict(xv.view(), ov.as_deref())))
        });
        let mut preds: Vec<Option<Vec<f64>>> = vec![Some(vec![0.0; n]); n_learn];
        for (job, res) in jobs.into_iter().enumerate() {
            let l = job / v;
            match res {
                Ok((test, p)) => {
                    if let Some(buf) = preds[l].as_mut() {
                        for (i, val) in test.into_iter().zip(p) {
                            buf[i] = val;
                        }
                    }
                }
                Err(e) => {
                    if preds[l].is_some() {
                        warnings.push(format!("dropped {}: {e}", library[l].label()));
                        log::warn!("super learner dropped {}: {e}", library[l].label());
                    }
                    preds[l] = None;
                }
            }
        }
        preds
    };

    let cv_risks: Vec<Option<f64>> = if n_learn == 1 {
        vec![None]
    } else {
        cv_preds
            .iter()
            .map(|p| {
                p.as_ref().map(|p| p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64)
            })
            .collect()
    };
    let alive: Vec<usize> = if n_learn == 1 {
        vec![0]
    } else {
        (0..n_learn).filter(|&l| cv_risks[l].is_some_and(f64::is_finite)).collect()
    };
    if alive.is_empty() {
        return Err(Error::Learner("every learner in the library failed".into()));
    }
    let best = *alive
        .iter()
        .min_by(|&&a, &&b| cv_risks[a].unwrap_or(f64::INFINITY).total_cmp(&cv_risks[b].unwrap_or(f64::INFINITY)))
        .unwrap_or(&alive[0]);

    let mut weights = vec![0.0; n_learn];
    match mode {
        SlMode::Discrete => weights[best] = 1.0,
        SlMode::Convex if alive.len() == 1 => weights[best] = 1.0,
        SlMode::Convex => {
            let z = DMatrix::from_fn(n, alive.len(), |i, k| cv_preds[alive[k]].as_ref().map_or(0.0, |p| p[i]));
            let target = DVector::from_column_slice(y);
            let raw = super::nnls::nnls(&z, &target);
            let total: f64 = raw.iter().sum();
            if total > 0.0 && total.is_finite() {
                for (k, &l) in alive.iter().enumerate() {
                    weights[l] = raw[k] / total;
                }
            } else {
                weights[best] = 1.0;
            }
        }
    }

    let fits: Vec<Option<FittedModel>> = map_indexed(par, n_learn, |l| {
        if weights[l] == 0.0 {
            return Ok(None);
        }
        fit_learner(&library[l], x, y, offset, family, derive_seed(seed, 0), Parallelism::Sequential).map(Some)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok(SuperLearner {
        library: library.to_vec(),
        mode,
        family,
        v,
        cv_risks,
        weights,
        selected: Some(best),
        fits,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{ForestParams, TreeParams};
    use crate::rng;
    use ndarray::Array2;
    use rand::RngExt;
    use rand_distr::StandardNormal;

    fn linear(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut r = rng::seeded(seed);
        let x = Array2::from_shape_fn((n, 2), |_| r.sample::<f64, _>(StandardNormal));
        let y = (0..n).map(|i| 1.0 + 2.0 * x[[i, 0]] - x[[i, 1]] + 0.5 * r.sample::<f64, _>(StandardNormal)).collect();
        (x, y)
    }

    #[test]
    fn discrete_selects_true_model() {
        let (x, y) = linear(300, 1);
        let sl = super_learn(&[LearnerSpec::Mean, LearnerSpec::Glm], x.view(), &y, None, 5, SlMode::Discrete, Family::Identity, 3, Parallelism::Sequential).unwrap();
        assert_eq!(sl.selected, Some(1));
        assert_eq!(sl.weights, vec![0.0, 1.0]);
        let risk = sl.cv_risk().unwrap();
        assert!(sl.cv_risks.iter().flatten().all(|r| risk <= *r));
    }

    #[test]
    fn single_learner_gets_full_weight() {
        let (x, y) = linear(50, 2);
        let sl = super_learn(&[LearnerSpec::Glm], x.view(), &y, None, 5, SlMode::Convex, Family::Identity, 3, Parallelism::Sequential).unwrap();
        assert_eq!(sl.weights, vec![1.0]);
        assert!(sl.winner().is_some());
    }

    #[test]
    fn convex_weights_on_simplex() {
        for seed in 0..5 {
            let (x, y) = linear(120, 10 + seed);
            let lib = vec![
                LearnerSpec::Mean,
                LearnerSpec::Glm,
                LearnerSpec::RegressionTree(TreeParams { alpha: None, ..TreeParams::default() }),
                LearnerSpec::RandomForest(ForestParams { n_trees: 10, ..ForestParams::default() }),
            ];
            let sl = super_learn(&lib, x.view(), &y, None, 4, SlMode::Convex, Family::Identity, seed, Parallelism::Sequential).unwrap();
            assert!(sl.weights.iter().all(|w| *w >= 0.0));
            assert!((sl.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn failing_learner_is_dropped() {
        let (x, y) = linear(60, 4);
        let yb: Vec<f64> = y.iter().map(|v| (*v > 1.0) as u8 as f64).collect();
        let off = vec![0.1; 60];
        let lib = vec![LearnerSpec::RegressionTree(TreeParams::default()), LearnerSpec::Glm];
        let sl = super_learn(&lib, x.view(), &yb, Some(&off), 3, SlMode::Discrete, Family::Logistic, 0, Parallelism::Sequential).unwrap();
        assert_eq!(sl.cv_risks[0], None);
        assert_eq!(sl.selected, Some(1));
        assert_eq!(sl.warnings.len(), 1);
        let all_fail = super_learn(&vec![lib[0].clone(), lib[0].clone()], x.view(), &yb, Some(&off), 3, SlMode::Discrete, Family::Logistic, 0, Parallelism::Sequential);
        assert!(all_fail.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn discrete_pick_has_minimal_cv_risk(seed in 0u64..10_000, n in 40usize..150) {
                let (x, y) = linear(n, seed);
                let lib = vec![
                    LearnerSpec::Mean,
                    LearnerSpec::Glm,
                    LearnerSpec::RegressionTree(TreeParams { alpha: None, ..TreeParams::default() }),
                ];
                let sl = super_learn(&lib, x.view(), &y, None, 3, SlMode::Discrete, Family::Identity, seed, Parallelism::Sequential).unwrap();
                let risk = sl.cv_risk().unwrap();
                prop_assert!(sl.cv_risks.iter().flatten().all(|r| risk <= *r));
                prop_assert_eq!(sl.weights.iter().filter(|w| **w == 1.0).count(), 1);
            }
        }
    }
}

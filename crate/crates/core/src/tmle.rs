//! Targeted maximum likelihood estimation of the effect of a binary region
//! indicator.
//!
//! Outcomes are mapped to `[0, 1]`, the initial outcome regression is
//! fluctuated along the clever covariate
//! `H = 1{in}/g(W) − 1{out}/(1 − g(W))` with a logistic working model, and the
//! ARE is the mean difference of the targeted counterfactual predictions.
//! Standard errors come from the empirical variance of the influence curve.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::glm::{expit, fit_glm, logit, GlmOptions};
use crate::learners::{super_learn, Family, LearnerSpec, SlMode, SuperLearner};
use crate::par::Parallelism;
use crate::rng::derive_seed;
use crate::scale::{clamp_unit, OutcomeScale};

pub const DEFAULT_G_MIN: f64 = 0.025;
pub const Z_95: f64 = 1.96;

/// Outcome and propensity regressions trained on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFits {
    pub q_model: SuperLearner,
    pub g_model: SuperLearner,
    pub g_min: f64,
    pub scale: OutcomeScale,
}

/// Initial estimates on the estimation rows. `q1`/`q0` are on the scaled
/// outcome; `g1` is the untruncated propensity of being inside the region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialEstimates {
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
    pub g1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleResult {
    /// ARE in outcome units.
    pub psi: f64,
    /// Plug-in estimate before targeting.
    pub psi_initial: f64,
    pub epsilon: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    pub n: usize,
    pub n_in_region: usize,
    /// Share of propensities hit by truncation.
    pub truncated_fraction: f64,
    pub warnings: Vec<String>,
    /// Influence curve in outcome units.
    #[serde(skip_serializing, default)]
    pub ic: Vec<f64>,
    #[serde(skip_serializing, default)]
    pub q1_star: Vec<f64>,
    #[serde(skip_serializing, default)]
    pub q0_star: Vec<f64>,
}

pub fn two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let norm = Normal::standard();
    (2.0 * norm.sf(z.abs())).min(1.0)
}

pub fn fit_nuisance(
    train: &Dataset,
    indicator: &[bool],
    library: &[LearnerSpec],
    g_min: f64,
    v: usize,
    seed: u64,
    par: Parallelism,
) -> Result<NuisanceFits> {
    let n_in = indicator.iter().filter(|&&b| b).count();
    if n_in == 0 || n_in == indicator.len() {
        return Err(Error::Positivity(format!(
            "region indicator has a single class ({n_in} of {} inside)",
            indicator.len()
        )));
    }
    if !(g_min > 0.0 && g_min < 0.5) {
        return Err(Error::InvalidArgument("g_min must lie in (0, 0.5)".into()));
    }
    let scale = OutcomeScale::fit(train.y.as_slice().unwrap_or(&train.y.to_vec()))?;
    let ys = scale.scale(&train.y.to_vec()).values;
    let ind: Vec<f64> = indicator.iter().map(|&b| f64::from(u8::from(b))).collect();
    let xq = train.treatment_design(&ind);
    let q_model = super_learn(library, xq.view(), &ys, None, v, SlMode::Discrete, Family::Identity, derive_seed(seed, 1), par)?;
    let g_model = super_learn(library, train.w.view(), &ind, None, v, SlMode::Discrete, Family::Logistic, derive_seed(seed, 2), par)?;
    Ok(NuisanceFits { q_model, g_model, g_min, scale })
}

impl NuisanceFits {
    pub fn initial_estimates(&self, data: &Dataset) -> InitialEstimates {
        let n = data.n();
        let q_at = |v: f64| -> Vec<f64> {
            let x: Array2<f64> = data.treatment_design(&vec![v; n]);
            self.q_model.predict(x.view(), None).into_iter().map(clamp_unit).collect()
        };
        InitialEstimates {
            q1: q_at(1.0),
            q0: q_at(0.0),
            g1: self.g_model.predict(data.w.view(), None),
        }
    }
}

/// `H_i = 1{in}/g1_i − 1{out}/(1 − g1_i)`.
pub fn clever_covariate(indicator: &[bool], g1: &[f64]) -> Vec<f64> {
    indicator
        .iter()
        .zip(g1)
        .map(|(&a, &g)| if a { 1.0 / g } else { -1.0 / (1.0 - g) })
        .collect()
}

/// Logistic fluctuation of `q` along `h` with `logit(q)` as offset.
/// Returns `ε` and any warning raised on the way.
pub fn fluctuate(q: &[f64], h: &[f64], y: &[f64], weights: Option<&[f64]>) -> (f64, Option<String>) {
    if h.iter().all(|&v| v == 0.0) {
        return (0.0, None);
    }
    let off: Vec<f64> = q.iter().map(|&v| logit(clamp_unit(v))).collect();
    let x = Array2::from_shape_vec((h.len(), 1), h.to_vec()).expect("column shape");
    let opts = GlmOptions { intercept: false, max_iter: 100, tol: 1e-13 };
    match fit_glm(x.view(), y, Some(&off), Family::Logistic, weights, &opts) {
        Ok(fit) if !fit.stabilized && fit.coef[0].is_finite() => (fit.coef[0], None),
        Ok(_) => (0.0, Some("fluctuation separated; epsilon set to 0".into())),
        Err(e) => (0.0, Some(format!("fluctuation failed ({e}); epsilon set to 0"))),
    }
}

/// Target the initial estimates and compute the ARE with its IC-based inference.
/// `y_scaled` must already be on the `scale` used for `init.q*`.
pub fn targeted_estimate(
    y_scaled: &[f64],
    indicator: &[bool],
    init: &InitialEstimates,
    g_min: f64,
    scale: &OutcomeScale,
    weights: Option<&[f64]>,
) -> TmleResult {
    let n = y_scaled.len();
    let mut warnings = Vec::new();
    let n_trunc = init.g1.iter().filter(|&&g| g < g_min || g > 1.0 - g_min).count();
    let g1: Vec<f64> = init.g1.iter().map(|g| g.clamp(g_min, 1.0 - g_min)).collect();
    let truncated_fraction = n_trunc as f64 / n.max(1) as f64;
    if truncated_fraction > 0.1 {
        warnings.push(format!("{:.1}% of propensities truncated", 100.0 * truncated_fraction));
    }
    let h = clever_covariate(indicator, &g1);
    let q1: Vec<f64> = init.q1.iter().copied().map(clamp_unit).collect();
    let q0: Vec<f64> = init.q0.iter().copied().map(clamp_unit).collect();
    let qa: Vec<f64> = indicator.iter().enumerate().map(|(i, &a)| if a { q1[i] } else { q0[i] }).collect();

    let (epsilon, warn) = fluctuate(&qa, &h, y_scaled, weights);
    warnings.extend(warn);

    let h1: Vec<f64> = g1.iter().map(|g| 1.0 / g).collect();
    let h0: Vec<f64> = g1.iter().map(|g| -1.0 / (1.0 - g)).collect();
    let upd = |q: f64, hh: f64| expit(logit(q) + epsilon * hh);
    let q1s: Vec<f64> = (0..n).map(|i| upd(q1[i], h1[i])).collect();
    let q0s: Vec<f64> = (0..n).map(|i| upd(q0[i], h0[i])).collect();
    let qas: Vec<f64> = (0..n).map(|i| if indicator[i] { q1s[i] } else { q0s[i] }).collect();

    let ones = vec![1.0; n];
    let w = weights.unwrap_or(&ones);
    let wsum: f64 = w.iter().sum();
    let range = scale.range();
    let wmean = |f: &dyn Fn(usize) -> f64| (0..n).map(|i| w[i] * f(i)).sum::<f64>() / wsum;
    let psi = range * wmean(&|i| q1s[i] - q0s[i]);
    let psi_initial = range * wmean(&|i| q1[i] - q0[i]);
    let ic: Vec<f64> = (0..n)
        .map(|i| range * (h[i] * (y_scaled[i] - qas[i]) + q1s[i] - q0s[i]) - psi)
        .collect();
    let var = (0..n).map(|i| (w[i] * ic[i]).powi(2)).sum::<f64>() / (wsum * wsum);
    let se = var.sqrt();
    let p_value = two_sided_p(psi / se);
    TmleResult {
        psi,
        psi_initial,
        epsilon,
        se,
        ci_lower: psi - Z_95 * se,
        ci_upper: psi + Z_95 * se,
        p_value,
        n,
        n_in_region: indicator.iter().filter(|&&b| b).count(),
        truncated_fraction,
        warnings,
        ic,
        q1_star: scale.unscale(&q1s),
        q0_star: scale.unscale(&q0s),
    }
}

/// TMLE of the region's ARE on `est` using nuisance models trained elsewhere.
pub fn tmle_estimate(est: &Dataset, indicator: &[bool], nuisance: &NuisanceFits) -> TmleResult {
    let init = nuisance.initial_estimates(est);
    let scaled = nuisance.scale.scale(&est.y.to_vec());
    let mut res = targeted_estimate(
        &scaled.values,
        indicator,
        &init,
        nuisance.g_min,
        &nuisance.scale,
        est.weights.as_ref().and_then(|w| w.as_slice()),
    );
    if scaled.out_of_range > 0 {
        res.warnings.push(format!("{} outcomes outside the training range were clamped", scaled.out_of_range));
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array1;
    use rand::RngExt;
    use rand_distr::StandardNormal;

    #[test]
    fn clever_covariate_values() {
        assert_eq!(clever_covariate(&[true], &[0.5]), vec![2.0]);
        assert!((clever_covariate(&[false], &[0.8])[0] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_covariate_gives_zero_epsilon() {
        let (e, w) = fluctuate(&[0.3, 0.6], &[0.0, 0.0], &[0.2, 0.9], None);
        assert_eq!(e, 0.0);
        assert!(w.is_none());
    }

    #[test]
    fn mean_clever_covariate_vanishes_at_matching_rate() {
        let mut r = rng::seeded(1);
        let pi = 0.3;
        let n = 200_000;
        let ind: Vec<bool> = (0..n).map(|_| r.random::<f64>() < pi).collect();
        let h = clever_covariate(&ind, &vec![pi; n]);
        let m = h.iter().sum::<f64>() / n as f64;
        assert!(m.abs() < 0.02, "mean H = {m}");
    }

    fn rct(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
        let mut r = rng::seeded(seed);
        let w: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let a: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.5).collect();
        let y = (0..n).map(|i| w[i] + if a[i] { 1.0 } else { 0.0 } + r.sample::<f64, _>(StandardNormal)).collect();
        (y, a, w)
    }

    #[test]
    fn score_equation_solved_after_update() {
        let (y, a, _) = rct(500, 3);
        let scale = OutcomeScale::fit(&y).unwrap();
        let ys = scale.scale(&y).values;
        let init = InitialEstimates { q1: vec![0.6; 500], q0: vec![0.4; 500], g1: vec![0.5; 500] };
        let res = targeted_estimate(&ys, &a, &init, DEFAULT_G_MIN, &scale, None);
        let mean_ic = res.ic.iter().sum::<f64>() / 500.0;
        let sd = (res.ic.iter().map(|v| (v - mean_ic).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!(mean_ic.abs() <= 1e-8 * sd, "mean IC {mean_ic}, sd {sd}");
        assert!((res.ci_upper - res.psi - Z_95 * res.se).abs() < 1e-12);
        assert!(res.se > 0.0);
    }

    #[test]
    fn zero_epsilon_keeps_plug_in() {
        let y = vec![0.2, 0.8, 0.4, 0.6];
        let a = vec![true, true, false, false];
        let scale = OutcomeScale::new(0.0, 1.0).unwrap();
        // q equal to the arm means and g = 0.5 solve the score equation with ε = 0.
        let init = InitialEstimates { q1: vec![0.5; 4], q0: vec![0.5; 4], g1: vec![0.5; 4] };
        let res = targeted_estimate(&y, &a, &init, DEFAULT_G_MIN, &scale, None);
        assert!(res.epsilon.abs() < 1e-12);
        assert!((res.psi - res.psi_initial).abs() < 1e-12);
    }

    #[test]
    fn propensity_truncated() {
        let scale = OutcomeScale::new(0.0, 1.0).unwrap();
        let init = InitialEstimates { q1: vec![0.5; 2], q0: vec![0.5; 2], g1: vec![0.001, 0.5] };
        let res = targeted_estimate(&[0.3, 0.7], &[true, false], &init, 0.025, &scale, None);
        assert_eq!(res.truncated_fraction, 0.5);
    }

    #[test]
    fn one_class_indicator_is_positivity_error() {
        let n = 20;
        let ds = Dataset::new(
            Array2::zeros((n, 1)),
            Array2::zeros((n, 1)),
            Array1::from_iter((0..n).map(|i| i as f64)),
            vec!["w".into()],
            vec!["a".into()],
            "y",
        )
        .unwrap();
        let lib = vec![LearnerSpec::Glm];
        assert!(matches!(
            fit_nuisance(&ds, &vec![true; n], &lib, 0.025, 3, 0, Parallelism::Sequential),
            Err(Error::Positivity(_))
        ));
    }

    #[test]
    fn randomized_indicator_propensity_near_rate() {
        let n = 1000;
        let mut r = rng::seeded(8);
        let w = Array2::from_shape_fn((n, 2), |_| r.sample::<f64, _>(StandardNormal));
        let ind: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.35).collect();
        let y = Array1::from_iter((0..n).map(|i| w[[i, 0]] + r.sample::<f64, _>(StandardNormal)));
        let ds = Dataset::new(w, Array2::zeros((n, 1)), y, vec!["w1".into(), "w2".into()], vec!["a".into()], "y").unwrap();
        let lib = vec![LearnerSpec::Mean, LearnerSpec::Glm];
        let fits = fit_nuisance(&ds, &ind, &lib, 0.025, 5, 1, Parallelism::Sequential).unwrap();
        let rate = ind.iter().filter(|&&b| b).count() as f64 / n as f64;
        let g = fits.initial_estimates(&ds).g1;
        assert!(g.iter().all(|p| (p - rate).abs() < 0.05));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn inputs() -> impl Strategy<Value = Vec<(f64, bool, f64, f64, f64)>> {
            proptest::collection::vec((0.0f64..1.0, any::<bool>(), 0.05f64..0.95, 0.05f64..0.95, 0.001f64..0.999), 20..120)
                .prop_filter("both arms present", |v| v.iter().any(|r| r.1) && v.iter().any(|r| !r.1))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn targeting_solves_score_with_symmetric_ci(rows in inputs()) {
                let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
                let a: Vec<bool> = rows.iter().map(|r| r.1).collect();
                let init = InitialEstimates {
                    q1: rows.iter().map(|r| r.2).collect(),
                    q0: rows.iter().map(|r| r.3).collect(),
                    g1: rows.iter().map(|r| r.4).collect(),
                };
                let scale = OutcomeScale::new(0.0, 1.0).unwrap();
                let res = targeted_estimate(&y, &a, &init, DEFAULT_G_MIN, &scale, None);
                prop_assume!(res.warnings.iter().all(|w| !w.contains("fluctuation failed")));
                let n = y.len() as f64;
                let mean_ic = res.ic.iter().sum::<f64>() / n;
                let sd = (res.ic.iter().map(|v| (v - mean_ic).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                prop_assert!(mean_ic.abs() <= 1e-6 * sd.max(1e-12), "mean IC {} sd {}", mean_ic, sd);
                prop_assert!(res.se > 0.0);
                prop_assert!(((res.ci_upper - res.psi) - (res.psi - res.ci_lower)).abs() < 1e-9);
                prop_assert!(res.truncated_fraction >= 0.0 && res.truncated_fraction <= 1.0);
            }
        }
    }
}

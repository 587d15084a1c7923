//! K-fold cross-estimation: regions and nuisance models are learned on each
//! fold's complement and the ARE is estimated on the held-out fold.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backfit::{backfit_joint, backfit_marginal, BackfitConfig};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::folds::{kfold_split, FoldSpec};
use crate::learners::{default_library, LearnerSpec};
use crate::par::{map_indexed, Parallelism};
use crate::region::RectRegion;
use crate::rng::derive_seed;
use crate::rules::{best_rule_per_varset, Direction};
use crate::scale::OutcomeScale;
use crate::tmle::{
    fit_nuisance, targeted_estimate, tmle_estimate, two_sided_p, InitialEstimates, TmleResult, DEFAULT_G_MIN, Z_95,
};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub k: usize,
    pub direction: Direction,
    pub seed: u64,
    /// Library for the outcome and propensity nuisance fits.
    pub library: Vec<LearnerSpec>,
    pub backfit: BackfitConfig,
    pub g_min: f64,
    pub sl_folds: usize,
    pub parallelism: Parallelism,
    pub run_joint: bool,
    pub run_marginal: bool,
    pub stability_threshold: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            k: 10,
            direction: Direction::Max,
            seed: 0,
            library: default_library(),
            backfit: BackfitConfig::default(),
            g_min: DEFAULT_G_MIN,
            sl_folds: 5,
            parallelism: Parallelism::Parallel,
            run_joint: true,
            run_marginal: true,
            stability_threshold: 0.75,
        }
    }
}

impl AnalysisOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid("K must be at least 2"));
        }
        if !(self.g_min > 0.0 && self.g_min < 0.5) {
            return Err(invalid("g_min must lie in (0, 0.5)"));
        }
        if self.sl_folds < 2 {
            return Err(invalid("sl_folds must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.stability_threshold) {
            return Err(invalid("stability_threshold must lie in [0, 1]"));
        }
        if !self.run_joint && !self.run_marginal {
            return Err(invalid("at least one of the joint and marginal analyses must run"));
        }
        if self.library.is_empty() {
            return Err(invalid("nuisance library is empty"));
        }
        for spec in &self.library {
            spec.validate()?;
        }
        self.backfit.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Joint,
    Marginal,
}

/// Cross-estimated quantities for one region on one estimation fold,
/// in outcome units, indexed by global row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Contribution {
    pub rows: Vec<usize>,
    pub indicator: Vec<bool>,
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
    pub g1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRegion {
    pub key: String,
    pub kind: RegionKind,
    pub varset: Vec<String>,
    pub region: RectRegion,
    /// Marginal contrasts only: the fold's reference region.
    pub reference: Option<RectRegion>,
    /// Lasso coefficient of a joint rule.
    pub coefficient: Option<f64>,
    pub tmle: Option<TmleResult>,
    pub skipped: Option<String>,
    #[serde(skip)]
    pub contribution: Option<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfitDiagnostics {
    pub target: String,
    pub iterations: usize,
    pub converged: bool,
    pub delta: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_estimation: usize,
    pub training_scale: OutcomeScale,
    pub regions: Vec<FoldRegion>,
    pub backfit: Vec<BackfitDiagnostics>,
    pub positivity_skips: usize,
    #[serde(skip)]
    pub training_rows: Vec<usize>,
    #[serde(skip)]
    pub estimation_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub psi: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
}

impl Estimate {
    fn from_tmle(t: &TmleResult) -> Self {
        Estimate {
            psi: t.psi,
            se: t.se,
            ci_lower: t.ci_lower,
            ci_upper: t.ci_upper,
            p_value: t.p_value,
            p_adjusted: t.p_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub fold: usize,
    pub region: RectRegion,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarsetReport {
    pub key: String,
    pub kind: RegionKind,
    pub varset: Vec<String>,
    pub union_region: RectRegion,
    pub reference_union: Option<RectRegion>,
    pub union_rule: String,
    pub stability: f64,
    pub folds_found: Vec<usize>,
    pub highlighted: bool,
    pub n_pooled: usize,
    pub pooled: Option<Estimate>,
    pub pooled_epsilon: Option<f64>,
    pub ivm: Option<Estimate>,
    /// Mean of the fold estimates; CI bounds are the mean fold bounds.
    pub mean_kfold: Option<Estimate>,
    pub fold_estimates: Vec<FoldEstimate>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub schema_version: String,
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub outcome: String,
    pub exposures: Vec<String>,
    pub covariates: Vec<String>,
    pub options: AnalysisOptions,
    pub global_scale: OutcomeScale,
    pub fold_sizes: Vec<usize>,
    pub results: Vec<VarsetReport>,
    pub folds: Vec<FoldResult>,
    pub positivity_skips: usize,
}

impl CvReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn get(&self, key: &str) -> Option<&VarsetReport> {
        self.results.iter().find(|r| r.key == key)
    }

    pub fn joint(&self) -> impl Iterator<Item = &VarsetReport> {
        self.results.iter().filter(|r| r.kind == RegionKind::Joint)
    }
}

/// Inverse-variance pooling: `w = 1/se²`, `θ = Σwψ/Σw`, `se = 1/√Σw`.
pub fn pool_ivm(estimates: &[(f64, f64)]) -> Result<Estimate> {
    if estimates.is_empty() {
        return Err(invalid("pool_ivm needs at least one estimate"));
    }
    if estimates.iter().any(|(_, se)| !(*se > 0.0) || !se.is_finite()) {
        return Err(invalid("pool_ivm needs positive finite standard errors"));
    }
    let (theta, se) = if let [(psi, se)] = estimates {
        (*psi, *se)
    } else {
        let wsum: f64 = estimates.iter().map(|(_, se)| 1.0 / (se * se)).sum();
        let theta = estimates.iter().map(|(psi, se)| psi / (se * se)).sum::<f64>() / wsum;
        (theta, 1.0 / wsum.sqrt())
    };
    let p = two_sided_p(theta / se);
    Ok(Estimate { psi: theta, se, ci_lower: theta - Z_95 * se, ci_upper: theta + Z_95 * se, p_value: p, p_adjusted: p })
}

pub fn stability_metric(found_in: usize, k: usize) -> f64 {
    found_in as f64 / k as f64
}

/// Pooled TMLE over stacked cross-estimates: one fluctuation on the global
/// outcome scale, IC and variance over all stacked rows.
pub fn pool_tmle(
    contributions: &[&Contribution],
    y: &[f64],
    scale: &OutcomeScale,
    g_min: f64,
    weights: Option<&[f64]>,
) -> Result<TmleResult> {
    if contributions.is_empty() {
        return Err(invalid("pool_tmle needs at least one fold contribution"));
    }
    let mut ys = Vec::new();
    let mut ind = Vec::new();
    let mut init = InitialEstimates { q1: Vec::new(), q0: Vec::new(), g1: Vec::new() };
    let mut wts = Vec::new();
    for c in contributions {
        for (j, &row) in c.rows.iter().enumerate() {
            ys.push(scale.scale_one(y[row]));
            ind.push(c.indicator[j]);
            init.q1.push(scale.scale_one(c.q1[j]));
            init.q0.push(scale.scale_one(c.q0[j]));
            init.g1.push(c.g1[j]);
            if let Some(w) = weights {
                wts.push(w[row]);
            }
        }
    }
    let w = weights.map(|_| wts.as_slice());
    Ok(targeted_estimate(&ys, &ind, &init, g_min, scale, w))
}

/// Estimate one region on a fold: nuisance on the training rows, TMLE on the estimation rows.
#[allow(clippy::too_many_arguments)]
fn estimate_region(
    train: &Dataset,
    est: &Dataset,
    est_rows: &[usize],
    ind_train: &[bool],
    ind_est: &[bool],
    opts: &AnalysisOptions,
    seed: u64,
) -> std::result::Result<(TmleResult, Contribution), String> {
    let n_in = ind_est.iter().filter(|&&b| b).count();
    if n_in == 0 || n_in == ind_est.len() {
        return Err(format!("positivity: estimation indicator has a single class ({n_in} of {})", ind_est.len()));
    }
    let nuis = match fit_nuisance(train, ind_train, &opts.library, opts.g_min, opts.sl_folds, seed, opts.parallelism) {
        Ok(n) => n,
        Err(Error::Positivity(m)) => return Err(format!("positivity: {m}")),
        Err(e) => return Err(format!("nuisance fit failed: {e}")),
    };
    let res = tmle_estimate(est, ind_est, &nuis);
    let init = nuis.initial_estimates(est);
    let contribution = Contribution {
        rows: est_rows.to_vec(),
        indicator: ind_est.to_vec(),
        q1: nuis.scale.unscale(&init.q1),
        q0: nuis.scale.unscale(&init.q0),
        g1: init.g1,
    };
    Ok((res, contribution))
}

fn run_fold(data: &Dataset, folds: &FoldSpec, fold: usize, opts: &AnalysisOptions) -> Result<FoldResult> {
    let tr_rows = folds.training(fold + 1);
    let est_rows = folds.estimation(fold + 1);
    let train = data.subset(&tr_rows);
    let est = data.subset(&est_rows);
    let names = &data.a_names;
    let seed = derive_seed(opts.seed, fold as u64);
    let par = opts.parallelism;
    let y_train = train.y.to_vec();
    let mut regions = Vec::new();
    let mut diags = Vec::new();

    if opts.run_joint {
        let bf = backfit_joint(train.a.view(), names, train.w.view(), &y_train, &opts.backfit, derive_seed(seed, 1), par)?;
        diags.push(BackfitDiagnostics {
            target: "joint".into(),
            iterations: bf.iterations,
            converged: bf.converged,
            delta: bf.delta,
            warnings: bf.warnings.clone(),
        });
        for (i, (key, cand)) in best_rule_per_varset(&bf.selected, opts.direction).into_iter().enumerate() {
            let ind_train = cand.region.evaluate(train.a.view(), names)?;
            let ind_est = cand.region.evaluate(est.a.view(), names)?;
            let r = estimate_region(&train, &est, &est_rows, &ind_train, &ind_est, opts, derive_seed(seed, 100 + i as u64));
            let (tmle, contribution, skipped) = match r {
                Ok((t, c)) => (Some(t), Some(c), None),
                Err(m) => (None, None, Some(m)),
            };
            regions.push(FoldRegion {
                key,
                kind: RegionKind::Joint,
                varset: cand.varset.clone(),
                region: cand.region.clone(),
                reference: None,
                coefficient: Some(cand.coefficient),
                tmle,
                skipped,
                contribution,
            });
        }
    }

    if opts.run_marginal {
        for (j, name) in names.iter().enumerate() {
            let bm = backfit_marginal(train.a.view(), names, j, train.w.view(), &y_train, &opts.backfit, derive_seed(seed, 200 + j as u64), par)?;
            diags.push(BackfitDiagnostics {
                target: name.clone(),
                iterations: bm.iterations,
                converged: bm.converged,
                delta: bm.delta,
                warnings: bm.warnings.clone(),
            });
            let Some(reference) = bm.regions.first().map(|r| r.region.clone()) else { continue };
            let ref_train = reference.evaluate(train.a.view(), names)?;
            let ref_est = reference.evaluate(est.a.view(), names)?;
            for (c, mr) in bm.regions.iter().enumerate().skip(1) {
                let in_train = mr.region.evaluate(train.a.view(), names)?;
                let in_est = mr.region.evaluate(est.a.view(), names)?;
                // Contrast rows: reference ∪ region.
                let tr_keep: Vec<usize> = (0..train.n()).filter(|&i| in_train[i] || ref_train[i]).collect();
                let es_keep: Vec<usize> = (0..est.n()).filter(|&i| in_est[i] || ref_est[i]).collect();
                let sub_train = train.subset(&tr_keep);
                let sub_est = est.subset(&es_keep);
                let ind_train: Vec<bool> = tr_keep.iter().map(|&i| in_train[i]).collect();
                let ind_est: Vec<bool> = es_keep.iter().map(|&i| in_est[i]).collect();
                let rows: Vec<usize> = es_keep.iter().map(|&i| est_rows[i]).collect();
                let r = if sub_est.n() < 2 || sub_train.n() < 2 * opts.sl_folds {
                    Err("positivity: too few rows in contrast".to_string())
                } else {
                    estimate_region(&sub_train, &sub_est, &rows, &ind_train, &ind_est, opts, derive_seed(seed, 300 + (j * 64 + c) as u64))
                };
                let (tmle, contribution, skipped) = match r {
                    Ok((t, c)) => (Some(t), Some(c), None),
                    Err(m) => (None, None, Some(m)),
                };
                regions.push(FoldRegion {
                    key: format!("{name}#{c}"),
                    kind: RegionKind::Marginal,
                    varset: vec![name.clone()],
                    region: mr.region.clone(),
                    reference: Some(reference.clone()),
                    coefficient: None,
                    tmle,
                    skipped,
                    contribution,
                });
            }
        }
    }

    let positivity_skips = regions.iter().filter(|r| r.skipped.as_deref().is_some_and(|m| m.starts_with("positivity"))).count();
    for r in &regions {
        if let Some(m) = &r.skipped {
            log::warn!("fold {}: region {} skipped: {m}", fold + 1, r.key);
        }
    }
    Ok(FoldResult {
        fold: fold + 1,
        n_train: tr_rows.len(),
        n_estimation: est_rows.len(),
        training_scale: OutcomeScale::fit(&y_train)?,
        regions,
        backfit: diags,
        positivity_skips,
        training_rows: tr_rows,
        estimation_rows: est_rows,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

fn summarize(
    key: &str,
    group: &[(usize, &FoldRegion)],
    data: &Dataset,
    scale: &OutcomeScale,
    opts: &AnalysisOptions,
) -> Result<VarsetReport> {
    let first = group[0].1;
    let union_region = RectRegion::union(&group.iter().map(|(_, r)| r.region.clone()).collect::<Vec<_>>())?;
    let reference_union = match first.kind {
        RegionKind::Marginal => Some(RectRegion::union(
            &group.iter().filter_map(|(_, r)| r.reference.clone()).collect::<Vec<_>>(),
        )?),
        RegionKind::Joint => None,
    };
    let union_rule = match &reference_union {
        Some(r) => format!("{} vs {}", union_region.canonical(), r.canonical()),
        None => union_region.canonical(),
    };
    let folds_found: Vec<usize> = group.iter().map(|(f, _)| *f).collect();
    let stability = stability_metric(folds_found.len(), opts.k);
    let mut warnings = Vec::new();

    let est: Vec<(usize, &FoldRegion, &TmleResult)> =
        group.iter().filter_map(|(f, r)| r.tmle.as_ref().map(|t| (*f, *r, t))).collect();
    let fold_estimates: Vec<FoldEstimate> = est
        .iter()
        .map(|(f, r, t)| FoldEstimate { fold: *f, region: r.region.clone(), estimate: Estimate::from_tmle(t) })
        .collect();

    let contribs: Vec<&Contribution> = group.iter().filter_map(|(_, r)| r.contribution.as_ref()).collect();
    let (pooled, pooled_epsilon, n_pooled) = if contribs.is_empty() {
        (None, None, 0)
    } else {
        let y = data.y.to_vec();
        let w = data.weights.as_ref().map(|w| w.to_vec());
        let t = pool_tmle(&contribs, &y, scale, opts.g_min, w.as_deref())?;
        warnings.extend(t.warnings.iter().cloned());
        (Some(Estimate::from_tmle(&t)), Some(t.epsilon), t.n)
    };
    let fold_pairs: Vec<(f64, f64)> = est.iter().map(|(_, _, t)| (t.psi, t.se)).collect();
    let ivm = if fold_pairs.is_empty() {
        None
    } else {
        match pool_ivm(&fold_pairs) {
            Ok(e) => Some(e),
            Err(e) => {
                warnings.push(format!("IVM pooling skipped: {e}"));
                None
            }
        }
    };
    let mean_kfold = if est.is_empty() {
        None
    } else {
        let psi = mean(est.iter().map(|(_, _, t)| t.psi));
        let se = mean(est.iter().map(|(_, _, t)| t.se));
        let p = two_sided_p(psi / se);
        Some(Estimate {
            psi,
            se,
            ci_lower: mean(est.iter().map(|(_, _, t)| t.ci_lower)),
            ci_upper: mean(est.iter().map(|(_, _, t)| t.ci_upper)),
            p_value: p,
            p_adjusted: p,
        })
    };
    Ok(VarsetReport {
        key: key.to_string(),
        kind: first.kind,
        varset: first.varset.clone(),
        union_region,
        reference_union,
        union_rule,
        stability,
        highlighted: stability >= opts.stability_threshold,
        folds_found,
        n_pooled,
        pooled,
        pooled_epsilon,
        ivm,
        mean_kfold,
        fold_estimates,
        warnings,
    })
}

/// Bonferroni across the reported varsets of each kind.
fn adjust_p(results: &mut [VarsetReport]) {
    for kind in [RegionKind::Joint, RegionKind::Marginal] {
        let m = results.iter().filter(|r| r.kind == kind).count() as f64;
        for r in results.iter_mut().filter(|r| r.kind == kind) {
            for e in [&mut r.pooled, &mut r.ivm, &mut r.mean_kfold].into_iter().flatten() {
                e.p_adjusted = (e.p_value * m).min(1.0);
            }
        }
    }
}

pub fn run_analysis(data: &Dataset, opts: &AnalysisOptions) -> Result<CvReport> {
    opts.validate()?;
    let n = data.n();
    if n < 2 * opts.k {
        return Err(invalid(format!("n = {n} is too small for K = {}", opts.k)));
    }
    let global_scale = OutcomeScale::fit(&data.y.to_vec())?;
    let folds = kfold_split(n, opts.k, opts.seed)?;
    let fold_results: Vec<FoldResult> = map_indexed(opts.parallelism, opts.k, |f| run_fold(data, &folds, f, opts))
        .into_iter()
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<(RegionKind, String), Vec<(usize, &FoldRegion)>> = BTreeMap::new();
    for fr in &fold_results {
        for r in &fr.regions {
            groups.entry((r.kind, r.key.clone())).or_default().push((fr.fold, r));
        }
    }
    let mut results = groups
        .iter()
        .map(|((_, key), g)| summarize(key, g, data, &global_scale, opts))
        .collect::<Result<Vec<_>>>()?;
    adjust_p(&mut results);

    Ok(CvReport {
        schema_version: SCHEMA_VERSION.into(),
        seed: opts.seed,
        k: opts.k,
        n,
        outcome: data.y_name.clone(),
        exposures: data.a_names.clone(),
        covariates: data.w_names.clone(),
        options: opts.clone(),
        global_scale,
        fold_sizes: folds.sizes(),
        positivity_skips: fold_results.iter().map(|f| f.positivity_skips).sum(),
        results,
        folds: fold_results,
    })
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "NA".into()
    }
}

/// Pooled table: one row per varset with the pooled TMLE estimate.
pub fn write_pooled_csv<W: Write>(report: &CvReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["type", "are", "se", "lower_ci", "upper_ci", "p_value", "p_value_adj", "vars", "union_rule", "fold_pct"])?;
    for r in &report.results {
        let Some(e) = &r.pooled else { continue };
        let kind = match r.kind {
            RegionKind::Joint => "joint",
            RegionKind::Marginal => "marginal",
        };
        w.write_record([
            kind.to_string(),
            fmt_num(e.psi),
            fmt_num(e.se),
            fmt_num(e.ci_lower),
            fmt_num(e.ci_upper),
            fmt_num(e.p_value),
            fmt_num(e.p_adjusted),
            r.key.clone(),
            r.union_rule.clone(),
            format!("{:.0}", 100.0 * r.stability),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fold-specific table: one row per (fold, varset) estimate.
pub fn write_kfold_csv<W: Write>(report: &CvReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fold", "vars", "rule", "are", "se", "lower_ci", "upper_ci", "p_value", "skipped"])?;
    for f in &report.folds {
        for r in &f.regions {
            let rule = match &r.reference {
                Some(reference) => format!("{} vs {}", r.region.canonical(), reference.canonical()),
                None => r.region.canonical(),
            };
            let nums = match &r.tmle {
                Some(t) => [t.psi, t.se, t.ci_lower, t.ci_upper, t.p_value].map(fmt_num),
                None => std::array::from_fn(|_| "NA".to_string()),
            };
            let mut rec = vec![f.fold.to_string(), r.key.clone(), rule];
            rec.extend(nums);
            rec.push(r.skipped.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::lasso::PenaltyParams;
    use crate::rng;
    use crate::rules::RuleEnsembleConfig;
    use ndarray::{Array1, Array2};
    use rand::RngExt;
    use rand_distr::StandardNormal;

    #[test]
    fn ivm_equal_weights() {
        let e = pool_ivm(&[(1.0, 1.0), (3.0, 1.0)]).unwrap();
        assert!((e.psi - 2.0).abs() < 1e-12);
        assert!((e.se - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((e.ci_upper - e.psi - Z_95 * e.se).abs() < 1e-12);
    }

    #[test]
    fn ivm_unequal_weights_and_homogeneity() {
        let e = pool_ivm(&[(1.0, 0.1), (3.0, 10.0)]).unwrap();
        let (w1, w2) = (100.0, 0.01);
        assert!((e.psi - (w1 * 1.0 + w2 * 3.0) / (w1 + w2)).abs() < 1e-12);
        assert!((e.psi - 1.0002).abs() < 1e-4);
        assert!((e.se - 1.0 / (w1 + w2 as f64).sqrt()).abs() < 1e-12);
        let s = pool_ivm(&[(1.0, 0.7), (3.0, 70.0)]).unwrap();
        assert!((s.psi - e.psi).abs() < 1e-12);
        assert!((s.se - 7.0 * e.se).abs() < 1e-12);
    }

    #[test]
    fn ivm_single_and_invalid() {
        let e = pool_ivm(&[(2.5, 0.3)]).unwrap();
        assert_eq!((e.psi, e.se), (2.5, 0.3));
        assert!(pool_ivm(&[(1.0, 0.0)]).is_err());
        assert!(pool_ivm(&[]).is_err());
    }

    #[test]
    fn stability_examples() {
        assert_eq!(stability_metric(10, 10), 1.0);
        assert!((stability_metric(2, 3) - 0.67).abs() < 0.01);
    }

    #[test]
    fn pooling_identical_folds_matches_fold() {
        let mut r = rng::seeded(3);
        let n = 400;
        let y: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 10.0).collect();
        let ind: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.4).collect();
        let scale = OutcomeScale::fit(&y).unwrap();
        let c = Contribution {
            rows: (0..n).collect(),
            indicator: ind.clone(),
            q1: vec![6.0; n],
            q0: vec![4.0; n],
            g1: vec![0.4; n],
        };
        let single = pool_tmle(&[&c], &y, &scale, 0.025, None).unwrap();
        let doubled = pool_tmle(&[&c, &c], &y, &scale, 0.025, None).unwrap();
        assert!((single.psi - doubled.psi).abs() < 1e-9);
        assert!((single.epsilon - doubled.epsilon).abs() < 1e-9);
        let m = doubled.ic.iter().sum::<f64>() / doubled.ic.len() as f64;
        let sd = (doubled.ic.iter().map(|v| (v - m).powi(2)).sum::<f64>() / doubled.ic.len() as f64).sqrt();
        assert!(m.abs() <= 1e-8 * sd);
    }

    fn small_opts(k: usize) -> AnalysisOptions {
        let mut o = AnalysisOptions {
            k,
            seed: 11,
            library: vec![LearnerSpec::Mean, LearnerSpec::Glm],
            sl_folds: 3,
            ..AnalysisOptions::default()
        };
        o.backfit.h_library = vec![LearnerSpec::Mean, LearnerSpec::Glm];
        o.backfit.sl_folds = 3;
        o.backfit.max_iter = 3;
        o.backfit.rules = RuleEnsembleConfig {
            n_trees: 10,
            penalty: PenaltyParams { folds: 3, ..PenaltyParams::default() },
            ..RuleEnsembleConfig::default()
        };
        o
    }

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut r = rng::seeded(seed);
        let w = Array2::from_shape_fn((n, 2), |_| r.sample::<f64, _>(StandardNormal));
        let a = Array2::from_shape_fn((n, 2), |(i, _)| r.random::<f64>() + 0.1 * w[[i, 0]]);
        let y = Array1::from_shape_fn(n, |i| {
            2.0 * f64::from(u8::from(a[[i, 0]] > 0.5 && a[[i, 1]] > 0.5)) + w[[i, 0]] + 0.5 * r.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(w, a, y, vec!["W1".into(), "W2".into()], vec!["A1".into(), "A2".into()], "Y").unwrap()
    }

    #[test]
    fn tiny_data_runs_end_to_end() {
        let data = synthetic(50, 1);
        let rep = run_analysis(&data, &small_opts(2)).unwrap();
        assert_eq!(rep.folds.len(), 2);
        for r in &rep.results {
            assert!(r.stability > 0.0 && r.stability <= 1.0);
            assert!((r.stability * 2.0).fract() == 0.0);
        }
    }

    #[test]
    fn estimation_rows_never_used_for_training() {
        let data = synthetic(300, 2);
        let rep = run_analysis(&data, &small_opts(3)).unwrap();
        let mut all = Vec::new();
        for f in &rep.folds {
            assert!(f.training_rows.iter().all(|i| !f.estimation_rows.contains(i)));
            assert_eq!(f.training_rows.len() + f.estimation_rows.len(), 300);
            for r in &f.regions {
                if let Some(c) = &r.contribution {
                    assert!(c.rows.iter().all(|i| f.estimation_rows.contains(i)));
                }
            }
            all.extend(f.estimation_rows.iter().copied());
        }
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        let joint = rep.get("A1-A2").expect("joint region found");
        let pooled = joint.pooled.unwrap();
        assert!(pooled.ci_lower < 2.0 && 2.0 < pooled.ci_upper + 0.5, "{pooled:?}");
    }

    #[test]
    fn report_is_deterministic_and_tables_render() {
        let data = synthetic(200, 5);
        let mut opts = small_opts(2);
        opts.parallelism = Parallelism::Parallel;
        let a = run_analysis(&data, &opts).unwrap().to_json().unwrap();
        opts.parallelism = Parallelism::Sequential;
        let rep = run_analysis(&data, &opts).unwrap();
        opts.parallelism = Parallelism::Parallel;
        assert_eq!(a, rep.to_json().unwrap().replace("\"sequential\"", "\"parallel\""));
        let mut buf = Vec::new();
        write_pooled_csv(&rep, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("type,are,se,lower_ci,upper_ci,p_value,p_value_adj,vars,union_rule,fold_pct"));
        let mut buf = Vec::new();
        write_kfold_csv(&rep, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().count() > 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn pooled_ic_has_zero_mean(seed in 0u64..10_000, k in 1usize..5, q1 in 0.1f64..0.9, q0 in 0.1f64..0.9, g in 0.1f64..0.9) {
                let mut r = rng::seeded(seed);
                let n = 60 * k;
                let y: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 5.0).collect();
                let scale = OutcomeScale::fit(&y).unwrap();
                let contribs: Vec<Contribution> = (0..k)
                    .map(|f| {
                        let rows: Vec<usize> = (f * 60..(f + 1) * 60).collect();
                        let mut indicator: Vec<bool> = rows.iter().map(|_| r.random::<f64>() < g).collect();
                        indicator[0] = true;
                        indicator[1] = false;
                        let lift = f as f64 * 0.02;
                        Contribution {
                            indicator,
                            q1: vec![scale.range() * (q1 - lift).max(0.05) + scale.y_min; 60],
                            q0: vec![scale.range() * q0 + scale.y_min; 60],
                            g1: vec![g; 60],
                            rows,
                        }
                    })
                    .collect();
                let refs: Vec<&Contribution> = contribs.iter().collect();
                let res = pool_tmle(&refs, &y, &scale, 0.025, None).unwrap();
                prop_assume!(res.warnings.iter().all(|w| !w.contains("fluctuation failed")));
                let m = res.ic.iter().sum::<f64>() / res.ic.len() as f64;
                let sd = (res.ic.iter().map(|v| (v - m).powi(2)).sum::<f64>() / res.ic.len() as f64).sqrt();
                prop_assert!(m.abs() <= 1e-8 * sd, "mean {} sd {}", m, sd);
                prop_assert_eq!(res.ic.len(), n);
            }

            #[test]
            fn stability_is_a_fold_share(k in 1usize..20, found in 0usize..20) {
                let found = found.min(k);
                let s = stability_metric(found, k);
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!((s * k as f64 - found as f64).abs() < 1e-9);
            }
        }
    }
}

//! Backfitting of the additive model `E[Y | A, W] = f(A) + h(W)`.
//!
//! Each iteration refits the exposure side on `y` offset by the previous
//! covariate fit, then the covariate side on `y` offset by the new exposure
//! fit, until the combined prediction moves less than `delta`. Updating both
//! sides from the previous iterate makes the shared intercept oscillate.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::learners::lasso::PenaltyParams;
use crate::learners::{default_library, default_tree_library, super_learn, Family, LearnerSpec, SlMode, SuperLearner};
use crate::par::Parallelism;
use crate::region::RectRegion;
use crate::rng::derive_seed;
use crate::rules::{fit_rule_model, generate_candidate_rules, RuleCandidate, RuleEnsembleConfig, RuleModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMetric {
    /// Mean absolute change of `f + h` between iterations.
    #[default]
    Combined,
    /// Larger of the mean absolute changes of `f` and of `h`.
    PerSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackfitConfig {
    pub delta: f64,
    pub max_iter: usize,
    pub metric: ConvergenceMetric,
    pub sl_folds: usize,
    pub h_library: Vec<LearnerSpec>,
    pub tree_library: Vec<LearnerSpec>,
    pub rules: RuleEnsembleConfig,
}

impl Default for BackfitConfig {
    fn default() -> Self {
        BackfitConfig {
            delta: 0.001,
            max_iter: 10,
            metric: ConvergenceMetric::Combined,
            sl_folds: 5,
            h_library: default_library(),
            tree_library: default_tree_library(),
            rules: RuleEnsembleConfig::default(),
        }
    }
}

impl BackfitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(invalid("backfit delta must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("backfit max_iter must be at least 1"));
        }
        if self.h_library.is_empty() || self.tree_library.is_empty() {
            return Err(invalid("backfit learner libraries must be nonempty"));
        }
        self.rules.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationDelta {
    pub combined: f64,
    pub f_side: f64,
    pub h_side: f64,
}

/// Exposure-side fit of the joint backfit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExposureFit {
    Rules(RuleModel),
    /// No candidate rules: a constant.
    Constant(f64),
}

impl ExposureFit {
    pub fn predict(&self, a: ArrayView2<'_, f64>, names: &[String]) -> Result<Vec<f64>> {
        match self {
            ExposureFit::Rules(m) => m.predict(a, names),
            ExposureFit::Constant(c) => Ok(vec![*c; a.nrows()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackfitResult {
    pub f_model: ExposureFit,
    pub h_model: SuperLearner,
    pub selected: Vec<RuleCandidate>,
    pub iterations: usize,
    pub converged: bool,
    pub delta: f64,
    pub history: Vec<IterationDelta>,
    /// Training MSE of `f + h` after each iteration (index 0 is the initial fit).
    pub mse: Vec<f64>,
    pub warnings: Vec<String>,
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

fn mse(y: &[f64], f: &[f64], h: &[f64]) -> f64 {
    y.iter().zip(f).zip(h).map(|((y, f), h)| (y - f - h).powi(2)).sum::<f64>() / y.len().max(1) as f64
}

fn measure(metric: ConvergenceMetric, d: &IterationDelta) -> f64 {
    match metric {
        ConvergenceMetric::Combined => d.combined,
        ConvergenceMetric::PerSide => d.f_side.max(d.h_side),
    }
}

struct Loop<S> {
    state: S,
    f: Vec<f64>,
    h: Vec<f64>,
}

/// Shared iteration driver. `step(t, h_prev)` returns the new state and its predictions.
fn iterate<S: Clone>(
    y: &[f64],
    cfg: &BackfitConfig,
    init: Loop<S>,
    mut step: impl FnMut(usize, &[f64]) -> Result<Loop<S>>,
) -> Result<(Loop<S>, usize, bool, f64, Vec<IterationDelta>, Vec<f64>, Vec<String>)> {
    let mut cur = init;
    let mut history = Vec::new();
    let mut mse_trace = vec![mse(y, &cur.f, &cur.h)];
    let mut warnings = Vec::new();
    let mut best: Option<(Loop<S>, f64, usize)> = None;
    let mut growing = 0;
    let mut last = f64::INFINITY;
    for t in 1..=cfg.max_iter {
        let next = step(t, &cur.h)?;
        let combined_prev: Vec<f64> = cur.f.iter().zip(&cur.h).map(|(a, b)| a + b).collect();
        let combined_next: Vec<f64> = next.f.iter().zip(&next.h).map(|(a, b)| a + b).collect();
        let d = IterationDelta {
            combined: mean_abs_diff(&combined_next, &combined_prev),
            f_side: mean_abs_diff(&next.f, &cur.f),
            h_side: mean_abs_diff(&next.h, &cur.h),
        };
        history.push(d);
        mse_trace.push(mse(y, &next.f, &next.h));
        let m = measure(cfg.metric, &d);
        cur = next;
        if best.as_ref().is_none_or(|(_, bm, _)| m < *bm) {
            best = Some((Loop { state: cur.state.clone(), f: cur.f.clone(), h: cur.h.clone() }, m, t));
        }
        if m < cfg.delta {
            return Ok((cur, t, true, m, history, mse_trace, warnings));
        }
        growing = if m > last { growing + 1 } else { 0 };
        last = m;
        if growing >= 3 {
            warnings.push("backfitting diverged; returning the best iterate".into());
            log::warn!("backfitting diverged after {t} iterations");
            let (b, bm, bt) = best.expect("at least one iterate");
            return Ok((b, bt, false, bm, history, mse_trace, warnings));
        }
    }
    let m = history.last().map_or(f64::INFINITY, |d| measure(cfg.metric, d));
    if cfg.max_iter > 0 {
        warnings.push(format!("backfitting stopped at max_iter={} without reaching delta", cfg.max_iter));
    }
    Ok((cur, cfg.max_iter, false, m, history, mse_trace, warnings))
}

#[allow(clippy::too_many_arguments)]
fn fit_h(
    w: ArrayView2<'_, f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    cfg: &BackfitConfig,
    seed: u64,
    par: Parallelism,
) -> Result<(SuperLearner, Vec<f64>)> {
    let sl = super_learn(&cfg.h_library, w, y, offset, cfg.sl_folds, SlMode::Discrete, Family::Identity, seed, par)?;
    // h is the covariate component alone, without the offset.
    let pred = sl.predict(w, offset);
    let h = match offset {
        Some(o) => pred.iter().zip(o).map(|(p, o)| p - o).collect(),
        None => pred,
    };
    Ok((sl, h))
}

#[derive(Clone)]
struct JointState {
    f_model: ExposureFit,
    h_model: SuperLearner,
}

pub fn backfit_joint(
    a: ArrayView2<'_, f64>,
    names: &[String],
    w: ArrayView2<'_, f64>,
    y: &[f64],
    cfg: &BackfitConfig,
    seed: u64,
    par: Parallelism,
) -> Result<BackfitResult> {
    cfg.validate()?;
    let n = y.len();
    if a.nrows() != n || w.nrows() != n {
        return Err(invalid("backfit: row counts differ"));
    }
    let fit_f = |target: &[f64], penalty: &PenaltyParams, basis: Option<&ExposureFit>, s: u64| -> Result<(ExposureFit, Vec<f64>)> {
        let cands = match basis {
            Some(ExposureFit::Rules(m)) => m.candidates.clone(),
            Some(ExposureFit::Constant(_)) => Vec::new(),
            None => generate_candidate_rules(a, names, target, &cfg.rules, derive_seed(s, 1), par)?,
        };
        if cands.is_empty() {
            let c = target.iter().sum::<f64>() / n as f64;
            return Ok((ExposureFit::Constant(c), vec![c; n]));
        }
        let model = fit_rule_model(cands, a, names, target, penalty, derive_seed(s, 2), par)?;
        let pred = model.predict(a, names)?;
        Ok((ExposureFit::Rules(model), pred))
    };

    let (f0, f0p) = fit_f(y, &cfg.rules.penalty, None, derive_seed(seed, 100))?;
    let (h0, h0p) = fit_h(w, y, None, cfg, derive_seed(seed, 200), par)?;
    let init = Loop { state: JointState { f_model: f0, h_model: h0 }, f: f0p, h: h0p };

    // Basis and λ are fixed by the first backfit iteration.
    let mut frozen: Option<(ExposureFit, PenaltyParams)> = None;
    let (fin, iterations, converged, delta, history, mse_trace, warnings) = iterate(y, cfg, init, |_, h_prev| {
        let target: Vec<f64> = y.iter().zip(h_prev).map(|(y, h)| y - h).collect();
        // Same stream every iteration so a pure shift of the target gives the same basis.
        let s = derive_seed(seed, 100);
        let (f_model, fp) = match &frozen {
            None => {
                let (m, p) = fit_f(&target, &cfg.rules.penalty, None, s)?;
                let pinned = match &m {
                    ExposureFit::Rules(rm) => PenaltyParams { lambdas: Some(vec![rm.fit.lambda]), ..cfg.rules.penalty.clone() },
                    ExposureFit::Constant(_) => cfg.rules.penalty.clone(),
                };
                frozen = Some((m.clone(), pinned));
                (m, p)
            }
            Some((basis, pinned)) => fit_f(&target, pinned, Some(basis), s)?,
        };
        let (h_model, hp) = fit_h(w, y, Some(&fp), cfg, derive_seed(seed, 200), par)?;
        Ok(Loop { state: JointState { f_model, h_model }, f: fp, h: hp })
    })?;

    let selected = match &fin.state.f_model {
        ExposureFit::Rules(m) => m.selected(a, names)?,
        ExposureFit::Constant(_) => Vec::new(),
    };
    Ok(BackfitResult {
        f_model: fin.state.f_model,
        h_model: fin.state.h_model,
        selected,
        iterations,
        converged,
        delta,
        history,
        mse: mse_trace,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRegion {
    pub region: RectRegion,
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalResult {
    pub exposure: String,
    /// Leaf intervals ordered by lower bound; the first is the reference.
    pub regions: Vec<MarginalRegion>,
    pub iterations: usize,
    pub converged: bool,
    pub delta: f64,
    pub warnings: Vec<String>,
}

/// Order leaf intervals of a single-exposure tree and flag the lowest as reference.
pub fn order_marginal_leaves(mut leaves: Vec<RectRegion>) -> Vec<MarginalRegion> {
    let key = |r: &RectRegion| r.clauses()[0].lower.unwrap_or(f64::NEG_INFINITY);
    leaves.sort_by(|x, y| key(x).total_cmp(&key(y)));
    leaves
        .into_iter()
        .enumerate()
        .map(|(i, region)| MarginalRegion { region, reference: i == 0 })
        .collect()
}

pub fn backfit_marginal(
    a: ArrayView2<'_, f64>,
    names: &[String],
    exposure: usize,
    w: ArrayView2<'_, f64>,
    y: &[f64],
    cfg: &BackfitConfig,
    seed: u64,
    par: Parallelism,
) -> Result<MarginalResult> {
    cfg.validate()?;
    if exposure >= a.ncols() || a.nrows() != y.len() || w.nrows() != y.len() {
        return Err(invalid("backfit_marginal: bad exposure index or row counts"));
    }
    let col: Array2<f64> = a.select(Axis(1), &[exposure]);
    let name = names[exposure].clone();
    let fit_f = |target_offset: Option<&[f64]>, s: u64| -> Result<(SuperLearner, Vec<f64>)> {
        let sl = super_learn(&cfg.tree_library, col.view(), y, target_offset, cfg.sl_folds, SlMode::Discrete, Family::Identity, s, par)?;
        let pred = sl.predict(col.view(), target_offset);
        let f = match target_offset {
            Some(o) => pred.iter().zip(o).map(|(p, o)| p - o).collect(),
            None => pred,
        };
        Ok((sl, f))
    };
    let (f0, f0p) = fit_f(None, derive_seed(seed, 300))?;
    let (h0, h0p) = fit_h(w, y, None, cfg, derive_seed(seed, 400), par)?;
    let init = Loop { state: (f0, h0), f: f0p, h: h0p };
    let (fin, iterations, converged, delta, _, _, warnings) = iterate(y, cfg, init, |_, h_prev| {
        let (fs, fp) = fit_f(Some(h_prev), derive_seed(seed, 300))?;
        let (hs, hp) = fit_h(w, y, Some(&fp), cfg, derive_seed(seed, 400), par)?;
        Ok(Loop { state: (fs, hs), f: fp, h: hp })
    })?;
    let leaves = fin
        .state
        .0
        .winner()
        .and_then(|m| m.as_tree())
        .map(|t| t.leaf_regions(std::slice::from_ref(&name)))
        .unwrap_or_default();
    Ok(MarginalResult {
        exposure: name,
        regions: order_marginal_leaves(leaves),
        iterations,
        converged,
        delta,
        warnings,
    })
}

//! Scoring a cross-estimated report against a data-generating process.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Confusion, Dgp};
use crate::cross::{CvReport, Estimate, VarsetReport};
use crate::error::Result;
use crate::rules::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    PooledTmle,
    MeanKfold,
    Ivm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Oracle,
    DataAdaptive,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::PooledTmle, EstimatorKind::MeanKfold, EstimatorKind::Ivm];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::PooledTmle => "pooled_tmle",
            EstimatorKind::MeanKfold => "mean_kfold",
            EstimatorKind::Ivm => "ivm",
        }
    }
}

impl TargetKind {
    pub const ALL: [TargetKind; 2] = [TargetKind::Oracle, TargetKind::DataAdaptive];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Oracle => "oracle",
            TargetKind::DataAdaptive => "data_adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub n: usize,
    pub iteration: usize,
    pub estimator: EstimatorKind,
    pub target: TargetKind,
    pub varset: Option<String>,
    #[serde(with = "nan_null")]
    pub estimate: f64,
    #[serde(with = "nan_null")]
    pub se: f64,
    #[serde(with = "nan_null")]
    pub ci_lower: f64,
    #[serde(with = "nan_null")]
    pub ci_upper: f64,
    #[serde(with = "nan_null")]
    pub truth: f64,
    #[serde(with = "nan_null")]
    pub bias: f64,
    #[serde(with = "nan_null")]
    pub sqrt_n_bias: f64,
    /// Squared standard error of this run's estimate.
    #[serde(with = "nan_null")]
    pub variance: f64,
    #[serde(with = "nan_null")]
    pub mse: f64,
    #[serde(with = "nan_null")]
    pub n_mse: f64,
    pub covered: bool,
    pub confusion: Option<Confusion>,
    pub no_discovery: bool,
}

impl EvalRecord {
    fn new(n: usize, iteration: usize, estimator: EstimatorKind, target: TargetKind, varset: &str, e: &Estimate, truth: f64, confusion: Confusion) -> Self {
        let bias = e.psi - truth;
        let variance = e.se * e.se;
        let mse = bias * bias + variance;
        EvalRecord {
            n,
            iteration,
            estimator,
            target,
            varset: Some(varset.to_string()),
            estimate: e.psi,
            se: e.se,
            ci_lower: e.ci_lower,
            ci_upper: e.ci_upper,
            truth,
            bias,
            sqrt_n_bias: (n as f64).sqrt() * bias,
            variance,
            mse,
            n_mse: n as f64 * mse,
            covered: e.ci_lower <= truth && truth <= e.ci_upper,
            confusion: Some(confusion),
            no_discovery: false,
        }
    }

    fn missing(n: usize, iteration: usize, estimator: EstimatorKind, target: TargetKind, truth: f64) -> Self {
        EvalRecord {
            n,
            iteration,
            estimator,
            target,
            varset: None,
            estimate: f64::NAN,
            se: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            truth,
            bias: f64::NAN,
            sqrt_n_bias: f64::NAN,
            variance: f64::NAN,
            mse: f64::NAN,
            n_mse: f64::NAN,
            covered: false,
            confusion: None,
            no_discovery: true,
        }
    }
}

/// Joint result scored against the truth: the most stable varset, ties to
/// the pooled estimate furthest in the analysis direction.
pub fn primary_result(report: &CvReport) -> Option<&VarsetReport> {
    let sign = match report.options.direction {
        Direction::Max => 1.0,
        Direction::Min => -1.0,
    };
    report.joint().filter(|r| r.pooled.is_some()).max_by(|a, b| {
        a.stability
            .total_cmp(&b.stability)
            .then_with(|| (sign * a.pooled.unwrap().psi).total_cmp(&(sign * b.pooled.unwrap().psi)))
            .then_with(|| b.key.cmp(&a.key))
    })
}

/// NaN marks a missing value and round-trips through JSON as `null`.
mod nan_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Six records: {pooled TMLE, mean k-fold, IVM} × {oracle, data-adaptive}.
pub fn evaluate_run(report: &CvReport, dgp: &dyn Dgp, iteration: usize) -> Result<Vec<EvalRecord>> {
    let n = report.n;
    let oracle = dgp.oracle_truth();
    let Some(res) = primary_result(report) else {
        let mut out = Vec::new();
        for est in EstimatorKind::ALL {
            for tgt in TargetKind::ALL {
                let truth = if tgt == TargetKind::Oracle { oracle } else { f64::NAN };
                out.push(EvalRecord::missing(n, iteration, est, tgt, truth));
            }
        }
        return Ok(out);
    };
    let confusion = dgp.confusion(&res.union_region)?;
    let union_truth = dgp.region_truth(&res.union_region).unwrap_or(f64::NAN);
    let fold_truths: Vec<f64> = res.fold_estimates.iter().filter_map(|f| dgp.region_truth(&f.region).ok()).collect();
    let mean_fold_truth = if fold_truths.is_empty() {
        f64::NAN
    } else {
        fold_truths.iter().sum::<f64>() / fold_truths.len() as f64
    };
    let mut out = Vec::new();
    for est in EstimatorKind::ALL {
        let e = match est {
            EstimatorKind::PooledTmle => res.pooled,
            EstimatorKind::MeanKfold => res.mean_kfold,
            EstimatorKind::Ivm => res.ivm,
        };
        for tgt in TargetKind::ALL {
            let truth = match (tgt, est) {
                (TargetKind::Oracle, _) => oracle,
                (TargetKind::DataAdaptive, EstimatorKind::MeanKfold) => mean_fold_truth,
                (TargetKind::DataAdaptive, _) => union_truth,
            };
            out.push(match &e {
                Some(e) => EvalRecord::new(n, iteration, est, tgt, &res.key, e, truth, confusion),
                None => EvalRecord::missing(n, iteration, est, tgt, truth),
            });
        }
    }
    Ok(out)
}

/// Aggregates over iterations in the layout of the bias/SD/MSE/coverage tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub estimator: EstimatorKind,
    pub target: TargetKind,
    pub iterations: usize,
    pub no_discovery: usize,
    pub mean_bias: f64,
    pub abs_bias: f64,
    pub sqrt_n_abs_bias: f64,
    pub sd: f64,
    /// `mean_bias² + sd²`.
    pub mse: f64,
    pub n_mse: f64,
    pub coverage: f64,
    pub median_tpr: f64,
    pub median_tnr: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn summarize(records: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, EstimatorKind, TargetKind), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.n, r.estimator, r.target)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((n, estimator, target), rs)| {
            let ok: Vec<&&EvalRecord> = rs.iter().filter(|r| !r.no_discovery && r.bias.is_finite()).collect();
            let k = ok.len() as f64;
            let mean_bias = ok.iter().map(|r| r.bias).sum::<f64>() / k;
            let var = ok.iter().map(|r| (r.bias - mean_bias).powi(2)).sum::<f64>() / k;
            let mse = mean_bias * mean_bias + var;
            SummaryRow {
                n,
                estimator,
                target,
                iterations: rs.len(),
                no_discovery: rs.len() - ok.len(),
                mean_bias,
                abs_bias: mean_bias.abs(),
                sqrt_n_abs_bias: (n as f64).sqrt() * mean_bias.abs(),
                sd: var.sqrt(),
                mse,
                n_mse: n as f64 * mse,
                coverage: ok.iter().filter(|r| r.covered).count() as f64 / k,
                median_tpr: median(ok.iter().filter_map(|r| r.confusion.map(|c| c.tpr())).collect()),
                median_tnr: median(ok.iter().filter_map(|r| r.confusion.map(|c| c.tnr())).collect()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(bias: f64, se: f64) -> EvalRecord {
        let e = Estimate { psi: 1.0 + bias, se, ci_lower: 1.0 + bias - 1.96 * se, ci_upper: 1.0 + bias + 1.96 * se, p_value: 0.0, p_adjusted: 0.0 };
        EvalRecord::new(100, 0, EstimatorKind::PooledTmle, TargetKind::Oracle, "A1-A2", &e, 1.0, Confusion { tp: 5, tn: 5, fp: 0, fn_: 0 })
    }

    #[test]
    fn mse_identity_per_record_and_summary() {
        let r = rec(0.3, 0.2);
        assert_eq!(r.mse, r.bias * r.bias + r.variance);
        assert!((r.n_mse - 100.0 * r.mse).abs() < 1e-12);
        assert!(r.covered);
        let rows = summarize(&[rec(0.3, 0.2), rec(-0.1, 0.2), rec(0.5, 0.01)]);
        let s = &rows[0];
        assert_eq!(s.mse, s.mean_bias * s.mean_bias + s.sd * s.sd);
        assert!((s.coverage - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.median_tpr, 1.0);
    }

    #[test]
    fn confusion_rates() {
        let c = Confusion::from_indicators(&[true, true, false, false], &[true, false, false, true]);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 1, 1));
        assert_eq!(c.tpr(), 0.5);
        assert_eq!(c.tnr(), 0.5);
    }
}

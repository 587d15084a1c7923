//! Elastic-net penalized GLMs by cyclic coordinate descent.
//!
//! Columns are standardized internally (population scale). The objective is
//! `(1/n)·loss + λ·(mix·|β|₁ + (1 − mix)/2·|β|²)` with squared-error loss for
//! the identity family and negative log-likelihood for the logistic family
//! (solved by IRLS around the coordinate-descent inner loop). `λ` is chosen by
//! inner cross-validation with the one-standard-error rule.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::glm::expit;
use super::Family;
use crate::error::{invalid, Result};
use crate::folds::kfold_split;
use crate::par::{map_indexed, Parallelism};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyParams {
    /// 1 = lasso, 0 = ridge.
    pub mix: f64,
    pub n_lambda: usize,
    pub lambda_min_ratio: Option<f64>,
    /// Explicit descending grid; overrides `n_lambda`.
    pub lambdas: Option<Vec<f64>>,
    pub folds: usize,
    pub one_se: bool,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            mix: 1.0,
            n_lambda: 50,
            lambda_min_ratio: None,
            lambdas: None,
            folds: 5,
            one_se: true,
            tol: 1e-10,
            max_sweeps: 10_000,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(invalid("penalty mix must lie in [0, 1]"));
        }
        if let Some(l) = &self.lambdas {
            if l.is_empty() || l.iter().any(|v| !(*v > 0.0)) || l.windows(2).any(|w| w[1] > w[0]) {
                return Err(invalid("lambda grid must be positive and descending"));
            }
        } else if self.n_lambda == 0 {
            return Err(invalid("n_lambda must be positive"));
        }
        if self.folds < 2 {
            return Err(invalid("penalized glm needs at least 2 inner folds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedFit {
    pub family: Family,
    pub intercept: f64,
    /// Coefficients on the original column scale.
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub cv_risk: Vec<f64>,
}

impl PenalizedFit {
    pub fn nonzero(&self) -> Vec<usize> {
        (0..self.coef.len()).filter(|&j| self.coef[j] != 0.0).collect()
    }

    pub fn is_intercept_only(&self) -> bool {
        self.coef.iter().all(|&c| c == 0.0)
    }

    pub fn linear_predictor(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let nz = self.nonzero();
        x.rows()
            .into_iter()
            .map(|row| self.intercept + nz.iter().map(|&j| self.coef[j] * row[j]).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, offset: Option<&[f64]>) -> Vec<f64> {
        let mut eta = self.linear_predictor(x);
        if let Some(o) = offset {
            eta.iter_mut().zip(o).for_each(|(e, o)| *e += o);
        }
        match self.family {
            Family::Identity => eta,
            Family::Logistic => eta.into_iter().map(expit).collect(),
        }
    }
}

/// One point on a regularization path, on the original column scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub lambda: f64,
    pub intercept: f64,
    pub coef: Vec<f64>,
}

struct Standardized {
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl Standardized {
    fn new(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows() as f64;
        let mut cols = Vec::with_capacity(x.ncols());
        let mut means = Vec::with_capacity(x.ncols());
        let mut sds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.sum() / n;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n;
            let sd = v.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                cols.push(col.iter().map(|c| (c - m) / sd).collect());
                sds.push(sd);
            } else {
                cols.push(vec![0.0; x.nrows()]);
                sds.push(0.0);
            }
            means.push(m);
        }
        Standardized { cols, means, sds }
    }

    fn to_original(&self, b0: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let mut intercept = b0;
        let coef: Vec<f64> = beta
            .iter()
            .zip(&self.sds)
            .zip(&self.means)
            .map(|((b, sd), m)| {
                if *sd > 0.0 && *b != 0.0 {
                    let c = b / sd;
                    intercept -= c * m;
                    c
                } else {
                    0.0
                }
            })
            .collect();
        (intercept, coef)
    }
}

fn soft(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Weighted elastic-net coordinate descent on standardized columns. `w` need not sum to 1.
#[allow(clippy::too_many_arguments)]
fn coordinate_descent(
    cols: &[Vec<f64>],
    w: &[f64],
    z: &[f64],
    lambda: f64,
    mix: f64,
    b0: &mut f64,
    beta: &mut [f64],
    tol: f64,
    max_sweeps: usize,
) {
    let n = z.len();
    let wsum: f64 = w.iter().sum();
    let xw: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().zip(w).map(|(x, w)| w * x * x).sum())
        .collect();
    let mut r: Vec<f64> = (0..n)
        .map(|i| z[i] - *b0 - cols.iter().zip(beta.iter()).map(|(c, b)| if *b != 0.0 { c[i] * b } else { 0.0 }).sum::<f64>())
        .collect();
    let l1 = lambda * mix;
    let l2 = lambda * (1.0 - mix);

    let update = |j: usize, b0: &mut f64, beta: &mut [f64], r: &mut [f64]| -> f64 {
        let _ = b0;
        if xw[j] == 0.0 {
            return 0.0;
        }
        let c = &cols[j];
        let g: f64 = c.iter().zip(w).zip(r.iter()).map(|((x, w), r)| w * x * r).sum::<f64>() + xw[j] * beta[j];
        let new = soft(g, l1) / (xw[j] + l2);
        let d = new - beta[j];
        if d != 0.0 {
            for i in 0..n {
                r[i] -= c[i] * d;
            }
            beta[j] = new;
        }
        xw[j] * d * d
    };
    let center = |b0: &mut f64, r: &mut [f64]| -> f64 {
        let d = r.iter().zip(w).map(|(r, w)| r * w).sum::<f64>() / wsum;
        if d != 0.0 {
            *b0 += d;
            r.iter_mut().for_each(|v| *v -= d);
        }
        wsum * d * d
    };

    for _ in 0..max_sweeps {
        let mut change = center(b0, &mut r);
        for j in 0..cols.len() {
            change = change.max(update(j, b0, beta, &mut r));
        }
        if change < tol {
            break;
        }
        let active: Vec<usize> = (0..cols.len()).filter(|&j| beta[j] != 0.0).collect();
        for _ in 0..max_sweeps {
            let mut c = center(b0, &mut r);
            for &j in &active {
                c = c.max(update(j, b0, beta, &mut r));
            }
            if c < tol {
                break;
            }
        }
    }
}

fn default_ratio(n: usize, p: usize) -> f64 {
    if n > p {
        1e-3
    } else {
        1e-2
    }
}

/// Smallest λ at which every penalized coefficient is zero.
pub fn lambda_max(x: ArrayView2<'_, f64>, y: &[f64], offset: Option<&[f64]>, family: Family, mix: f64) -> f64 {
    let st = Standardized::new(x);
    lambda_max_std(&st, y, offset, family, mix)
}

fn lambda_max_std(st: &Standardized, y: &[f64], offset: Option<&[f64]>, family: Family, mix: f64) -> f64 {
    let n = y.len() as f64;
    let resid: Vec<f64> = match family {
        Family::Identity => {
            let t: Vec<f64> = match offset {
                Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
                None => y.to_vec(),
            };
            let m = t.iter().sum::<f64>() / n;
            t.iter().map(|v| v - m).collect()
        }
        Family::Logistic => {
            let b0 = null_logistic_intercept(y, offset);
            y.iter()
                .enumerate()
                .map(|(i, v)| v - expit(b0 + offset.map_or(0.0, |o| o[i])))
                .collect()
        }
    };
    let g = st
        .cols
        .iter()
        .map(|c| (c.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / n).abs())
        .fold(0.0, f64::max);
    g / mix.max(1e-3)
}

fn null_logistic_intercept(y: &[f64], offset: Option<&[f64]>) -> f64 {
    let n = y.len() as f64;
    let ybar = (y.iter().sum::<f64>() / n).clamp(1e-6, 1.0 - 1e-6);
    let mut b0 = (ybar / (1.0 - ybar)).ln();
    if let Some(o) = offset {
        for _ in 0..50 {
            let mut s = 0.0;
            let mut h = 0.0;
            for (i, v) in y.iter().enumerate() {
                let mu = expit(b0 + o[i]);
                s += v - mu;
                h += mu * (1.0 - mu);
            }
            let step = s / h.max(1e-12);
            b0 += step;
            if step.abs() < 1e-12 {
                break;
            }
        }
    }
    b0
}

fn lambda_grid(st: &Standardized, y: &[f64], offset: Option<&[f64]>, family: Family, params: &PenaltyParams) -> Vec<f64> {
    if let Some(l) = &params.lambdas {
        return l.clone();
    }
    let lmax = lambda_max_std(st, y, offset, family, params.mix).max(1e-10);
    let ratio = params
        .lambda_min_ratio
        .unwrap_or_else(|| default_ratio(y.len(), st.cols.len()));
    let k = params.n_lambda;
    if k == 1 {
        return vec![lmax];
    }
    (0..k)
        .map(|i| lmax * ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

fn path_std(
    st: &Standardized,
    y: &[f64],
    offset: Option<&[f64]>,
    family: Family,
    mix: f64,
    lambdas: &[f64],
    params: &PenaltyParams,
) -> Vec<PathPoint> {
    let n = y.len();
    let p = st.cols.len();
    let mut beta = vec![0.0; p];
    let mut out = Vec::with_capacity(lambdas.len());
    match family {
        Family::Identity => {
            let z: Vec<f64> = match offset {
                Some(o) => y.iter().zip(o).map(|(a, b)| a - b).collect(),
                None => y.to_vec(),
            };
            let w = vec![1.0 / n as f64; n];
            let mut b0 = z.iter().sum::<f64>() / n as f64;
            for &lambda in lambdas {
                coordinate_descent(&st.cols, &w, &z, lambda, mix, &mut b0, &mut beta, params.tol, params.max_sweeps);
                let (intercept, coef) = st.to_original(b0, &beta);
                out.push(PathPoint { lambda, intercept, coef });
            }
        }
        Family::Logistic => {
            let zero = vec![0.0; n];
            let off = offset.unwrap_or(&zero);
            let mut b0 = null_logistic_intercept(y, offset);
            let mut w = vec![0.0; n];
            let mut z = vec![0.0; n];
            for &lambda in lambdas {
                for _ in 0..50 {
                    let prev_b0 = b0;
                    let prev = beta.clone();
                    for i in 0..n {
                        let lin: f64 = b0 + st.cols.iter().zip(&beta).map(|(c, b)| if *b != 0.0 { c[i] * b } else { 0.0 }).sum::<f64>();
                        let mu = expit(lin + off[i]).clamp(1e-9, 1.0 - 1e-9);
                        let v = mu * (1.0 - mu);
                        w[i] = v / n as f64;
                        z[i] = lin + (y[i] - mu) / v;
                    }
                    coordinate_descent(&st.cols, &w, &z, lambda, mix, &mut b0, &mut beta, params.tol, params.max_sweeps);
                    let d = beta
                        .iter()
                        .zip(&prev)
                        .map(|(a, b)| (a - b).abs())
                        .fold((b0 - prev_b0).abs(), f64::max);
                    if d < 1e-8 {
                        break;
                    }
                }
                let (intercept, coef) = st.to_original(b0, &beta);
                out.push(PathPoint { lambda, intercept, coef });
            }
        }
    }
    out
}

/// Regularization path over an explicit descending λ grid.
pub fn penalized_path(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    family: Family,
    mix: f64,
    lambdas: &[f64],
    tol: f64,
) -> Vec<PathPoint> {
    let st = Standardized::new(x);
    let params = PenaltyParams { tol, ..PenaltyParams::default() };
    path_std(&st, y, offset, family, mix, lambdas, &params)
}

fn predict_point(pt: &PathPoint, x: ArrayView2<'_, f64>, offset: Option<&[f64]>, family: Family, rows: &[usize]) -> Vec<f64> {
    let nz: Vec<usize> = (0..pt.coef.len()).filter(|&j| pt.coef[j] != 0.0).collect();
    rows.iter()
        .map(|&i| {
            let eta = pt.intercept + nz.iter().map(|&j| pt.coef[j] * x[[i, j]]).sum::<f64>() + offset.map_or(0.0, |o| o[i]);
            match family {
                Family::Identity => eta,
                Family::Logistic => expit(eta),
            }
        })
        .collect()
}

pub fn fit_penalized_glm(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    family: Family,
    params: &PenaltyParams,
    seed: u64,
    par: Parallelism,
) -> Result<PenalizedFit> {
    params.validate()?;
    let n = x.nrows();
    if y.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(invalid("penalized glm: length mismatch"));
    }
    let st = Standardized::new(x);
    let lambdas = lambda_grid(&st, y, offset, family, params);
    let full = path_std(&st, y, offset, family, params.mix, &lambdas, params);

    let (chosen, cv_risk) = if lambdas.len() == 1 {
        (0, Vec::new())
    } else {
        if n < 5 {
            return Err(invalid("penalized glm needs at least 5 rows for inner cross-validation"));
        }
        let v = params.folds.min(n);
        let folds = kfold_split(n, v, seed)?;
        let per_fold: Vec<Vec<f64>> = map_indexed(par, v, |f| {
            let train = folds.training(f + 1);
            let test = folds.estimation(f + 1);
            let xt = x.select(ndarray::Axis(0), &train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let ot: Option<Vec<f64>> = offset.map(|o| train.iter().map(|&i| o[i]).collect());
            let stt = Standardized::new(xt.view());
            let path = path_std(&stt, &yt, ot.as_deref(), family, params.mix, &lambdas, params);
            path.iter()
                .map(|pt| {
                    let pred = predict_point(pt, x, offset, family, &test);
                    pred.iter().zip(&test).map(|(p, &i)| (y[i] - p).powi(2)).sum::<f64>() / test.len() as f64
                })
                .collect()
        });
        let k = lambdas.len();
        let mean: Vec<f64> = (0..k).map(|l| per_fold.iter().map(|f| f[l]).sum::<f64>() / v as f64).collect();
        let se: Vec<f64> = (0..k)
            .map(|l| {
                let m = mean[l];
                let var = per_fold.iter().map(|f| (f[l] - m).powi(2)).sum::<f64>() / (v as f64 - 1.0);
                (var / v as f64).sqrt()
            })
            .collect();
        let best = (0..k).fold(0, |b, l| if mean[l] < mean[b] { l } else { b });
        let chosen = if params.one_se {
            (0..=best).find(|&l| mean[l] <= mean[best] + se[best]).unwrap_or(best)
        } else {
            best
        };
        (chosen, mean)
    };
    let pt = &full[chosen];
    Ok(PenalizedFit {
        family,
        intercept: pt.intercept,
        coef: pt.coef.clone(),
        lambda: pt.lambda,
        lambdas,
        cv_risk,
    })
}

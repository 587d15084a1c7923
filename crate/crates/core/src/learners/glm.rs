//! Generalized linear models: weighted least squares and logistic IRLS.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::Family;
use crate::error::{invalid, Error, Result};

/// Diagonal jitter for near-singular normal equations.
pub const RIDGE_JITTER: f64 = 1e-6;
/// Ridge penalty used when a logistic fit separates the data.
pub const SEPARATION_RIDGE: f64 = 1e-2;
const MAX_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmOptions {
    pub intercept: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { intercept: true, max_iter: 100, tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: Family,
    pub intercept: bool,
    /// Intercept first when present.
    pub coef: Vec<f64>,
    pub iterations: usize,
    /// True when the separation fallback (ridge-penalized refit) was used.
    pub stabilized: bool,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn design(x: ArrayView2<'_, f64>, intercept: bool) -> DMatrix<f64> {
    let n = x.nrows();
    let off = usize::from(intercept);
    DMatrix::from_fn(n, x.ncols() + off, |i, j| {
        if intercept && j == 0 {
            1.0
        } else {
            x[[i, j - off]]
        }
    })
}

/// Solve `(XᵀWX + ridge·P) β = XᵀW z`, adding jitter when the system is singular.
/// `P` is the identity without the intercept entry.
fn weighted_solve(
    x: &DMatrix<f64>,
    w: &[f64],
    z: &[f64],
    ridge: f64,
    intercept: bool,
) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwz = DVector::<f64>::zeros(p);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            xtwz[a] += xa * z[i];
            for b in 0..=a {
                xtwx[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(b, a)] = xtwx[(a, b)];
        }
    }
    if ridge > 0.0 {
        for a in usize::from(intercept)..p {
            xtwx[(a, a)] += ridge;
        }
    }
    if let Some(ch) = xtwx.clone().cholesky() {
        return Some(ch.solve(&xtwz));
    }
    let scale = (0..p).map(|a| xtwx[(a, a)]).sum::<f64>() / p.max(1) as f64;
    let jitter = RIDGE_JITTER * scale.max(1.0);
    for a in 0..p {
        xtwx[(a, a)] += jitter;
    }
    xtwx.cholesky().map(|ch| ch.solve(&xtwz))
}

pub fn fit_glm(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    offset: Option<&[f64]>,
    family: Family,
    weights: Option<&[f64]>,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let n = x.nrows();
    if y.len() != n {
        return Err(invalid("glm: y length differs from row count"));
    }
    if offset.is_some_and(|o| o.len() != n) || weights.is_some_and(|w| w.len() != n) {
        return Err(invalid("glm: offset/weights length differs from row count"));
    }
    if n == 0 {
        return Err(invalid("glm: no rows"));
    }
    if !opts.intercept && x.ncols() == 0 {
        return Err(invalid("glm: empty design"));
    }
    let xd = design(x, opts.intercept);
    let ones = vec![1.0; n];
    let wts = weights.unwrap_or(&ones);
    let zero = vec![0.0; n];
    let off = offset.unwrap_or(&zero);
    match family {
        Family::Identity => {
            let z: Vec<f64> = y.iter().zip(off).map(|(a, b)| a - b).collect();
            let beta = weighted_solve(&xd, wts, &z, 0.0, opts.intercept)
                .ok_or_else(|| Error::Learner("singular least-squares system".into()))?;
            Ok(GlmFit {
                family,
                intercept: opts.intercept,
                coef: beta.iter().copied().collect(),
                iterations: 1,
                stabilized: false,
            })
        }
        Family::Logistic => {
            if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(invalid("logistic glm: y must lie in [0, 1]"));
            }
            match irls(&xd, y, off, wts, 0.0, opts) {
                Ok((coef, it)) => Ok(GlmFit {
                    family,
                    intercept: opts.intercept,
                    coef,
                    iterations: it,
                    stabilized: false,
                }),
                Err(IrlsFailure::Separated) => {
                    log::warn!("logistic fit separates the data; refitting with a ridge penalty");
                    let (coef, it) = irls(&xd, y, off, wts, SEPARATION_RIDGE, opts)
                        .map_err(|e| e.into_error(opts.max_iter))?;
                    Ok(GlmFit {
                        family,
                        intercept: opts.intercept,
                        coef,
                        iterations: it,
                        stabilized: true,
                    })
                }
                Err(e) => Err(e.into_error(opts.max_iter)),
            }
        }
    }
}

enum IrlsFailure {
    Separated,
    NotConverged(Vec<f64>),
    Singular,
}

impl IrlsFailure {
    fn into_error(self, max_iter: usize) -> Error {
        match self {
            IrlsFailure::NotConverged(last_coefficients) => {
                Error::NoConvergence { iterations: max_iter, last_coefficients }
            }
            IrlsFailure::Separated => Error::NoConvergence {
                iterations: max_iter,
                last_coefficients: Vec::new(),
            },
            IrlsFailure::Singular => Error::Learner("singular IRLS system".into()),
        }
    }
}

fn irls(
    x: &DMatrix<f64>,
    y: &[f64],
    off: &[f64],
    wts: &[f64],
    ridge: f64,
    opts: &GlmOptions,
) -> std::result::Result<(Vec<f64>, usize), IrlsFailure> {
    let n = x.nrows();
    let p = x.ncols();
    let mut beta = DVector::<f64>::zeros(p);
    if opts.intercept {
        let ybar = y.iter().zip(wts).map(|(a, w)| a * w).sum::<f64>() / wts.iter().sum::<f64>();
        beta[0] = logit(ybar.clamp(1e-6, 1.0 - 1e-6));
    }
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    for it in 1..=opts.max_iter {
        let eta_lin = x * &beta;
        for i in 0..n {
            let eta = eta_lin[i] + off[i];
            let mu = expit(eta);
            let v = (mu * (1.0 - mu)).max(1e-12);
            w[i] = wts[i] * v;
            z[i] = eta_lin[i] + (y[i] - mu) / v;
        }
        let next = weighted_solve(x, &w, &z, ridge, opts.intercept).ok_or(IrlsFailure::Singular)?;
        let step = (&next - &beta).amax();
        let size = next.amax();
        beta = next;
        if ridge == 0.0 {
            let eta_max = (x * &beta)
                .iter()
                .zip(off)
                .map(|(e, o)| (e + o).abs())
                .fold(0.0, f64::max);
            let off_max = off.iter().fold(0.0f64, |m, o| m.max(o.abs()));
            if eta_max > MAX_ETA.max(off_max + MAX_ETA) && step > 1e-3 {
                return Err(IrlsFailure::Separated);
            }
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(IrlsFailure::Separated);
        }
        if step <= opts.tol * (1.0 + size) {
            return Ok((beta.iter().copied().collect(), it));
        }
    }
    Err(IrlsFailure::NotConverged(beta.iter().copied().collect()))
}

impl GlmFit {
    pub fn linear_predictor(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let off = usize::from(self.intercept);
        x.rows()
            .into_iter()
            .map(|row| {
                let mut eta = if self.intercept { self.coef[0] } else { 0.0 };
                for (j, v) in row.iter().enumerate() {
                    eta += self.coef[j + off] * v;
                }
                eta
            })
            .collect()
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, offset: Option<&[f64]>) -> Vec<f64> {
        let mut eta = self.linear_predictor(x);
        if let Some(o) = offset {
            for (e, o) in eta.iter_mut().zip(o) {
                *e += o;
            }
        }
        match self.family {
            Family::Identity => eta,
            Family::Logistic => eta.into_iter().map(expit).collect(),
        }
    }
}

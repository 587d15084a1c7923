//! Simulation studies: two data-generating processes with exact or
//! Monte-Carlo ground truth, and a harness that scores analyses against them.

pub mod dgp2d;
pub mod dgp3d;
pub mod eval;
pub mod harness;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::region::RectRegion;

pub use dgp2d::{truth_2d, Dgp2d, Dgp2dConfig};
pub use dgp3d::{truth_3d, Dgp3d, Dgp3dConfig};
pub use eval::{evaluate_run, summarize, EstimatorKind, EvalRecord, SummaryRow, TargetKind};
pub use harness::{run_iteration, run_study, StudySpec};

pub const COVARIATE_NAMES: [&str; 3] = ["age", "bmi", "sex"];

/// Counts of the estimated region against the true region on a large sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_).max(1) as f64
    }

    pub fn tnr(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp).max(1) as f64
    }

    pub fn from_indicators(est: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&e, &t) in est.iter().zip(truth) {
            match (e, t) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// A simulated sample with the data-generating process's truths attached.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub data: Dataset,
    /// Draws discarded because the true region was empty.
    pub resamples: usize,
}

pub trait Dgp: Sync {
    fn label(&self) -> &'static str;
    fn exposure_names(&self) -> Vec<String>;
    fn generate(&self, n: usize, seed: u64) -> Result<SimSample>;
    fn true_region(&self) -> &RectRegion;
    /// ARE of the true region.
    fn oracle_truth(&self) -> f64;
    /// ARE of an arbitrary region under the population law.
    fn region_truth(&self, region: &RectRegion) -> Result<f64>;
    /// Region against the true region on the cached large sample.
    fn confusion(&self, region: &RectRegion) -> Result<Confusion>;
}

/// One draw of (age, bmi, sex).
pub(crate) fn draw_covariates<R: Rng>(rng: &mut R) -> [f64; 3] {
    let age = Normal::new(37.0, 3.0).expect("valid normal").sample(rng);
    let bmi = Normal::new(20.0, 1.0).expect("valid normal").sample(rng);
    let sex = f64::from(u8::from(rng.random::<f64>() < 0.5));
    [age, bmi, sex]
}

/// Intercept plus standardized covariates, the design of the exposure multinomial.
pub(crate) fn multinomial_design(w: &[f64; 3]) -> [f64; 4] {
    [1.0, (w[0] - 37.0) / 3.0, w[1] - 20.0, w[2]]
}

/// Softmax of `x·β_c` over cells.
pub(crate) fn cell_probs(x: &[f64; 4], betas: &[[f64; 4]], out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for (o, b) in out.iter_mut().zip(betas) {
        *o = x.iter().zip(b).map(|(x, b)| x * b).sum();
        mx = mx.max(*o);
    }
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub(crate) fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `ARE = mean_w [ Σ_in μ p q / Σ_in p q − Σ_out μ p (1−q) / Σ_out p (1−q) ]` over cached
/// covariate draws, where `q_c` is the share of cell `c` inside the region.
/// Returns the estimate and its Monte-Carlo standard error.
pub(crate) fn cell_are(probs: &[f64], n_cells: usize, mu: &[f64], q: &[f64]) -> Option<(f64, f64)> {
    let b = probs.len() / n_cells;
    let mut diffs = Vec::with_capacity(b);
    for i in 0..b {
        let p = &probs[i * n_cells..(i + 1) * n_cells];
        let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..n_cells {
            let w_in = p[c] * q[c];
            let w_out = p[c] * (1.0 - q[c]);
            n1 += mu[c] * w_in;
            d1 += w_in;
            n0 += mu[c] * w_out;
            d0 += w_out;
        }
        if d1 > 0.0 && d0 > 0.0 {
            diffs.push(n1 / d1 - n0 / d0);
        }
    }
    if diffs.is_empty() {
        return None;
    }
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let v = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len().max(2) - 1) as f64;
    Some((m, (v / diffs.len() as f64).sqrt()))
}

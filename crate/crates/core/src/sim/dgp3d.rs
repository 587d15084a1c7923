//! Three correlated continuous exposures. One cut per exposure splits the
//! cube into 8 cells; the cell is drawn from a covariate-dependent
//! multinomial, then exposures are drawn inside the cell through a Gaussian
//! copula truncated to the cell's box.

use nalgebra::{Cholesky, Matrix3, Vector3};
use ndarray::{Array1, Array2};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::{cell_are, cell_probs, draw_covariates, multinomial_design, sample_index, Confusion, Dgp, SimSample, COVARIATE_NAMES};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::region::{Clause, RectRegion};
use crate::rng::{derive_seed, seeded};

pub const CELLS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dgp3dConfig {
    pub study_seed: u64,
    pub correlation: [[f64; 3]; 3],
    pub cuts: [f64; 3],
    /// Cell `j` has exposure `i` above its cut iff bit `i` of `j` is set.
    pub betas: [f64; CELLS],
    pub beta0: f64,
    pub beta_w: [f64; 2],
    pub sigma: f64,
    pub cell_beta_means: [f64; 4],
    pub cell_beta_sd: f64,
    pub truth_draws: usize,
    /// Within-cell draws per cell for region membership shares.
    pub cell_draws: usize,
    pub large_sample: usize,
}

impl Default for Dgp3dConfig {
    fn default() -> Self {
        let mut betas = [0.0; CELLS];
        betas[CELLS - 1] = 3.0;
        Dgp3dConfig {
            study_seed: 2023,
            correlation: [[1.0, 0.5, 0.8], [0.5, 1.0, 0.7], [0.8, 0.7, 1.0]],
            cuts: [0.0; 3],
            betas,
            beta0: 1.0,
            beta_w: [0.5, 0.3],
            sigma: 0.5,
            cell_beta_means: [0.3, 0.4, 0.5, 0.5],
            cell_beta_sd: 1.0,
            truth_draws: 100_000,
            cell_draws: 20_000,
            large_sample: 500_000,
        }
    }
}

/// Max coefficient minus the mean of the others.
pub fn truth_3d(betas: &[f64]) -> f64 {
    let (imax, max) = betas.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, b)| if b > acc.1 { (i, b) } else { acc });
    let rest: f64 = betas.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, b)| b).sum();
    max - rest / (betas.len() - 1) as f64
}

fn names() -> Vec<String> {
    vec!["M1".into(), "M2".into(), "M3".into()]
}

fn cell_box(cuts: &[f64; 3], cell: usize) -> [(f64, f64); 3] {
    std::array::from_fn(|i| if cell >> i & 1 == 1 { (cuts[i], f64::INFINITY) } else { (f64::NEG_INFINITY, cuts[i]) })
}

pub fn cell_region(cuts: &[f64; 3], cell: usize) -> Result<RectRegion> {
    let n = names();
    RectRegion::new(
        (0..3)
            .map(|i| if cell >> i & 1 == 1 { Clause::at_least(n[i].clone(), cuts[i]) } else { Clause::less_than(n[i].clone(), cuts[i]) })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Dgp3d {
    pub config: Dgp3dConfig,
    pub cell_betas: Vec<[f64; 4]>,
    chol: Matrix3<f64>,
    probs: Vec<f64>,
    /// `cell_draws` within-cell exposure rows per cell.
    cell_samples: Vec<Array2<f64>>,
    large: Array2<f64>,
    true_cell: usize,
    true_region: RectRegion,
    oracle: f64,
}

impl Dgp3d {
    pub fn new(config: Dgp3dConfig) -> Result<Self> {
        let max = config.betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n_max = config.betas.iter().filter(|&&b| b == max).count();
        if n_max != 1 {
            return Err(invalid("degenerate betas: the maximal cell must be unique"));
        }
        if !(config.sigma >= 0.0) || config.truth_draws < 100 || config.cell_draws < 100 || config.large_sample < 100 {
            return Err(invalid("invalid 3D DGP configuration"));
        }
        let true_cell = config.betas.iter().position(|&b| b == max).expect("max exists");
        let corr = Matrix3::from_fn(|i, j| config.correlation[i][j]);
        let chol = Cholesky::new(corr).ok_or_else(|| invalid("exposure correlation must be positive definite"))?.l();
        let mut rng = seeded(config.study_seed);
        let cell_betas: Vec<[f64; 4]> = (0..CELLS)
            .map(|_| {
                std::array::from_fn(|l| {
                    Normal::new(config.cell_beta_means[l], config.cell_beta_sd).expect("valid normal").sample(&mut rng)
                })
            })
            .collect();
        let mut dgp = Dgp3d {
            true_region: cell_region(&config.cuts, true_cell)?,
            config,
            cell_betas,
            chol,
            probs: Vec::new(),
            cell_samples: Vec::new(),
            large: Array2::zeros((0, 3)),
            true_cell,
            oracle: f64::NAN,
        };
        let mut rng = seeded(derive_seed(dgp.config.study_seed, 1));
        let mut probs = vec![0.0; dgp.config.truth_draws * CELLS];
        for row in probs.chunks_mut(CELLS) {
            let w = draw_covariates(&mut rng);
            cell_probs(&multinomial_design(&w), &dgp.cell_betas, row);
        }
        dgp.probs = probs;
        let mut rng = seeded(derive_seed(dgp.config.study_seed, 2));
        dgp.cell_samples = (0..CELLS)
            .map(|c| {
                let mut m = Array2::zeros((dgp.config.cell_draws, 3));
                for i in 0..dgp.config.cell_draws {
                    let x = dgp.within_cell(&mut rng, c);
                    for j in 0..3 {
                        m[[i, j]] = x[j];
                    }
                }
                m
            })
            .collect();
        let mut rng = seeded(derive_seed(dgp.config.study_seed, 3));
        let mut large = Array2::zeros((dgp.config.large_sample, 3));
        let mut p = [0.0; CELLS];
        for i in 0..dgp.config.large_sample {
            let w = draw_covariates(&mut rng);
            cell_probs(&multinomial_design(&w), &dgp.cell_betas, &mut p);
            let cell = sample_index(&mut rng, &p);
            let x = dgp.within_cell(&mut rng, cell);
            for j in 0..3 {
                large[[i, j]] = x[j];
            }
        }
        dgp.large = large;
        dgp.oracle = dgp.region_truth(&dgp.true_region.clone())?;
        Ok(dgp)
    }

    pub fn true_cell(&self) -> usize {
        self.true_cell
    }

    /// Correlated normal draw mapped to uniforms, then back-transformed inside the cell box.
    fn within_cell<R: Rng>(&self, rng: &mut R, cell: usize) -> [f64; 3] {
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let x = self.chol * z;
        let norm = StdNormal::standard();
        let bx = cell_box(&self.config.cuts, cell);
        std::array::from_fn(|i| {
            let u = norm.cdf(x[i]);
            let lo = norm.cdf(bx[i].0);
            let hi = norm.cdf(bx[i].1);
            let v = (lo + u * (hi - lo)).clamp(1e-15, 1.0 - 1e-15);
            let mut out = norm.inverse_cdf(v);
            // Guard against rounding just outside the box.
            if out < bx[i].0 {
                out = bx[i].0;
            }
            if out >= bx[i].1 {
                out = bx[i].1 - 1e-12 * (1.0 + bx[i].1.abs());
            }
            out
        })
    }

    pub fn conditional_probs(&self, w: &[f64; 3]) -> [f64; CELLS] {
        let mut p = [0.0; CELLS];
        cell_probs(&multinomial_design(w), &self.cell_betas, &mut p);
        p
    }

    pub fn region_truth_with_se(&self, region: &RectRegion) -> Result<(f64, f64)> {
        let names = names();
        let mut q = [0.0; CELLS];
        for (c, qc) in q.iter_mut().enumerate() {
            let inside = region.evaluate(self.cell_samples[c].view(), &names)?;
            *qc = inside.iter().filter(|&&b| b).count() as f64 / inside.len() as f64;
        }
        cell_are(&self.probs, CELLS, &self.config.betas, &q)
            .ok_or_else(|| invalid(format!("region `{region}` has zero probability inside or outside")))
    }
}

impl Dgp for Dgp3d {
    fn label(&self) -> &'static str {
        "3d"
    }

    fn exposure_names(&self) -> Vec<String> {
        names()
    }

    fn generate(&self, n: usize, seed: u64) -> Result<SimSample> {
        if n < 2 * CELLS {
            return Err(invalid("3D DGP needs n >= 16"));
        }
        for attempt in 0..1000u64 {
            let mut rng = seeded(derive_seed(seed, attempt));
            let noise = Normal::new(0.0, self.config.sigma.max(f64::MIN_POSITIVE)).expect("valid normal");
            let mut w = Array2::zeros((n, 3));
            let mut a = Array2::zeros((n, 3));
            let mut y = Array1::zeros(n);
            let mut hit = false;
            for i in 0..n {
                let wi = draw_covariates(&mut rng);
                let c = sample_index(&mut rng, &self.conditional_probs(&wi));
                hit |= c == self.true_cell;
                let x = self.within_cell(&mut rng, c);
                let eps = if self.config.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                for j in 0..3 {
                    w[[i, j]] = wi[j];
                    a[[i, j]] = x[j];
                }
                let z_age = (wi[0] - 37.0) / 3.0;
                let z_bmi = wi[1] - 20.0;
                y[i] = self.config.beta0 + self.config.betas[c] + self.config.beta_w[0] * z_age + self.config.beta_w[1] * z_bmi + eps;
            }
            if hit {
                let data = Dataset::new(w, a, y, COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(), names(), "Y")?;
                return Ok(SimSample { data, resamples: attempt as usize });
            }
        }
        Err(invalid("true region stayed empty after 1000 resamples"))
    }

    fn true_region(&self) -> &RectRegion {
        &self.true_region
    }

    fn oracle_truth(&self) -> f64 {
        self.oracle
    }

    fn region_truth(&self, region: &RectRegion) -> Result<f64> {
        Ok(self.region_truth_with_se(region)?.0)
    }

    fn confusion(&self, region: &RectRegion) -> Result<Confusion> {
        let names = names();
        let est = region.evaluate(self.large.view(), &names)?;
        let truth = self.true_region.evaluate(self.large.view(), &names)?;
        Ok(Confusion::from_indicators(&est, &truth))
    }
}

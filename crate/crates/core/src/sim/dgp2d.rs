//! Two discrete exposures on a 5×5 grid with covariate-driven cell
//! probabilities and a quadratic, interacting dose response.

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{cell_are, cell_probs, draw_covariates, multinomial_design, sample_index, Confusion, Dgp, SimSample, COVARIATE_NAMES};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::region::{Clause, RectRegion};
use crate::rng::{derive_seed, seeded};

pub const LEVELS: usize = 5;
pub const CELLS: usize = LEVELS * LEVELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dgp2dConfig {
    /// Seed of the β draw; fixed for a whole study.
    pub study_seed: u64,
    pub beta_means: [f64; 4],
    pub beta_sd: f64,
    pub noise_sd: f64,
    /// Covariate draws used by the ground-truth integrals.
    pub truth_draws: usize,
    /// Size of the sample approximating the population for confusion counts.
    pub large_sample: usize,
}

impl Default for Dgp2dConfig {
    fn default() -> Self {
        Dgp2dConfig {
            study_seed: 2023,
            beta_means: [0.3, 0.4, 0.5, 0.5],
            beta_sd: 2.0,
            noise_sd: 0.1,
            truth_draws: 100_000,
            large_sample: 500_000,
        }
    }
}

/// Exposure part of the outcome law.
pub fn dose_response(a1: f64, a2: f64) -> f64 {
    0.2 * a1 * a1 + 0.5 * a1 * a2 + 0.5 * a2 * a2
}

pub fn outcome_mean(a1: f64, a2: f64, age: f64, sex: f64) -> f64 {
    dose_response(a1, a2) + 0.2 * age + 0.4 * sex
}

fn cell_levels(c: usize) -> (f64, f64) {
    ((c / LEVELS + 1) as f64, (c % LEVELS + 1) as f64)
}

fn names() -> Vec<String> {
    vec!["A1".into(), "A2".into()]
}

/// Rectangle of grid levels `[l1, u1] × [l2, u2]` as a region with half-integer cuts.
pub fn grid_rectangle(l1: usize, u1: usize, l2: usize, u2: usize) -> Result<RectRegion> {
    let clause = |var: &str, l: usize, u: usize| -> Option<Clause> {
        match (l > 1, u < LEVELS) {
            (false, false) => None,
            (true, false) => Some(Clause::at_least(var, l as f64 - 0.5)),
            (false, true) => Some(Clause::less_than(var, u as f64 + 0.5)),
            (true, true) => Some(Clause::between(var, l as f64 - 0.5, u as f64 + 0.5)),
        }
    };
    let clauses: Vec<Clause> = [clause("A1", l1, u1), clause("A2", l2, u2)].into_iter().flatten().collect();
    if clauses.is_empty() {
        return Err(invalid("the full grid is not a proper region"));
    }
    RectRegion::new(clauses)
}

#[derive(Debug, Clone)]
pub struct Dgp2d {
    pub config: Dgp2dConfig,
    pub betas: Vec<[f64; 4]>,
    /// Cell probabilities for each cached covariate draw, row-major `truth_draws × 25`.
    probs: Vec<f64>,
    large_counts: [u64; CELLS],
    true_region: RectRegion,
    oracle: f64,
}

impl Dgp2d {
    pub fn new(config: Dgp2dConfig) -> Result<Self> {
        if config.truth_draws < 100 || config.large_sample < 100 || !(config.beta_sd >= 0.0) || !(config.noise_sd >= 0.0) {
            return Err(invalid("invalid 2D DGP configuration"));
        }
        let mut rng = seeded(config.study_seed);
        let betas: Vec<[f64; 4]> = (0..CELLS)
            .map(|_| {
                std::array::from_fn(|l| Normal::new(config.beta_means[l], config.beta_sd).expect("valid normal").sample(&mut rng))
            })
            .collect();
        let mut rng = seeded(derive_seed(config.study_seed, 1));
        let mut probs = vec![0.0; config.truth_draws * CELLS];
        for row in probs.chunks_mut(CELLS) {
            let w = draw_covariates(&mut rng);
            cell_probs(&multinomial_design(&w), &betas, row);
        }
        let mut rng = seeded(derive_seed(config.study_seed, 2));
        let mut large_counts = [0u64; CELLS];
        let mut p = [0.0; CELLS];
        for _ in 0..config.large_sample {
            let w = draw_covariates(&mut rng);
            cell_probs(&multinomial_design(&w), &betas, &mut p);
            large_counts[sample_index(&mut rng, &p)] += 1;
        }
        let mut dgp = Dgp2d {
            config,
            betas,
            probs,
            large_counts,
            true_region: grid_rectangle(LEVELS, LEVELS, LEVELS, LEVELS)?,
            oracle: f64::NAN,
        };
        let (region, psi) = dgp.search_true_region()?;
        dgp.true_region = region;
        dgp.oracle = psi;
        Ok(dgp)
    }

    fn mu(&self) -> [f64; CELLS] {
        std::array::from_fn(|c| {
            let (a1, a2) = cell_levels(c);
            dose_response(a1, a2)
        })
    }

    fn membership(region: &RectRegion) -> Result<[f64; CELLS]> {
        let names = names();
        let mut q = [0.0; CELLS];
        for (c, qc) in q.iter_mut().enumerate() {
            let (a1, a2) = cell_levels(c);
            *qc = f64::from(u8::from(region.contains_row(&[a1, a2], &names)?));
        }
        Ok(q)
    }

    /// Region ARE with its Monte-Carlo standard error.
    pub fn region_truth_with_se(&self, region: &RectRegion) -> Result<(f64, f64)> {
        let q = Self::membership(region)?;
        cell_are(&self.probs, CELLS, &self.mu(), &q)
            .ok_or_else(|| invalid(format!("region `{region}` has zero probability inside or outside")))
    }

    /// Argmax of the ARE over all proper grid rectangles.
    fn search_true_region(&self) -> Result<(RectRegion, f64)> {
        let mut best: Option<(RectRegion, f64)> = None;
        for l1 in 1..=LEVELS {
            for u1 in l1..=LEVELS {
                for l2 in 1..=LEVELS {
                    for u2 in l2..=LEVELS {
                        let Ok(r) = grid_rectangle(l1, u1, l2, u2) else { continue };
                        let Ok((psi, _)) = self.region_truth_with_se(&r) else { continue };
                        if best.as_ref().is_none_or(|(_, b)| psi > *b) {
                            best = Some((r, psi));
                        }
                    }
                }
            }
        }
        best.ok_or_else(|| Error::InvalidArgument("no grid rectangle has a defined ARE".into()))
    }

    /// Marginal cell probabilities under the covariate law (Monte-Carlo over the cached draws).
    pub fn cell_marginals(&self) -> [f64; CELLS] {
        let b = self.config.truth_draws as f64;
        let mut m = [0.0; CELLS];
        for row in self.probs.chunks(CELLS) {
            for (mc, p) in m.iter_mut().zip(row) {
                *mc += p / b;
            }
        }
        m
    }

    /// Conditional cell probabilities for one covariate row.
    pub fn conditional_probs(&self, w: &[f64; 3]) -> [f64; CELLS] {
        let mut p = [0.0; CELLS];
        cell_probs(&multinomial_design(w), &self.betas, &mut p);
        p
    }

    fn draw(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = seeded(seed);
        let mut w = Array2::zeros((n, 3));
        let mut a = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        let noise = Normal::new(0.0, self.config.noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");
        for i in 0..n {
            let wi = draw_covariates(&mut rng);
            let p = self.conditional_probs(&wi);
            let c = sample_index(&mut rng, &p);
            let (a1, a2) = cell_levels(c);
            let eps = if self.config.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            for j in 0..3 {
                w[[i, j]] = wi[j];
            }
            a[[i, 0]] = a1;
            a[[i, 1]] = a2;
            y[i] = outcome_mean(a1, a2, wi[0], wi[2]) + eps;
        }
        Dataset::new(w, a, y, COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(), names(), "Y")
    }
}

/// ARE of `region` under `dgp` using its cached covariate draws.
pub fn truth_2d(region: &RectRegion, dgp: &Dgp2d) -> Result<(f64, f64)> {
    dgp.region_truth_with_se(region)
}

impl Dgp for Dgp2d {
    fn label(&self) -> &'static str {
        "2d"
    }

    fn exposure_names(&self) -> Vec<String> {
        names()
    }

    fn generate(&self, n: usize, seed: u64) -> Result<SimSample> {
        if n < CELLS {
            return Err(invalid(format!("2D DGP needs n >= {CELLS}")));
        }
        for attempt in 0..1000u64 {
            let data = self.draw(n, derive_seed(seed, attempt))?;
            if self.true_region.evaluate_dataset(&data)?.iter().any(|&b| b) {
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
        let est = Self::membership(region)?;
        let truth = Self::membership(&self.true_region)?;
        let mut c = Confusion::default();
        for k in 0..CELLS {
            let cnt = self.large_counts[k];
            match (est[k] > 0.5, truth[k] > 0.5) {
                (true, true) => c.tp += cnt,
                (false, false) => c.tn += cnt,
                (true, false) => c.fp += cnt,
                (false, true) => c.fn_ += cnt,
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dgp2d {
        Dgp2d::new(Dgp2dConfig { truth_draws: 20_000, large_sample: 20_000, ..Dgp2dConfig::default() }).unwrap()
    }

    #[test]
    fn corner_outcome_is_thirty() {
        assert_eq!(outcome_mean(5.0, 5.0, 0.0, 0.0), 30.0);
    }

    #[test]
    fn seeds_change_cell_densities() {
        let a = Dgp2d::new(Dgp2dConfig { study_seed: 1, truth_draws: 1000, large_sample: 1000, ..Dgp2dConfig::default() }).unwrap();
        let b = Dgp2d::new(Dgp2dConfig { study_seed: 2, truth_draws: 1000, large_sample: 1000, ..Dgp2dConfig::default() }).unwrap();
        assert_ne!(a.betas, b.betas);
        let da = a.generate(500, 1).unwrap().data;
        let db = b.generate(500, 1).unwrap().data;
        assert_ne!(da.a, db.a);
    }

    #[test]
    fn cell_frequencies_match_multinomial() {
        let dgp = small();
        let n = 100_000;
        let data = dgp.generate(n, 7).unwrap().data;
        let mut expected = [0.0; CELLS];
        let mut var = [0.0; CELLS];
        let mut observed = [0.0; CELLS];
        for i in 0..n {
            let w = [data.w[[i, 0]], data.w[[i, 1]], data.w[[i, 2]]];
            let p = dgp.conditional_probs(&w);
            for c in 0..CELLS {
                expected[c] += p[c];
                var[c] += p[c] * (1.0 - p[c]);
            }
            let c = (data.a[[i, 0]] as usize - 1) * LEVELS + data.a[[i, 1]] as usize - 1;
            observed[c] += 1.0;
        }
        for c in 0..CELLS {
            assert!((observed[c] - expected[c]).abs() <= 3.0 * var[c].sqrt().max(1.0), "cell {c}");
        }
    }

    #[test]
    fn constant_dose_response_gives_zero() {
        let dgp = small();
        let r = grid_rectangle(3, 5, 2, 4).unwrap();
        let q = Dgp2d::membership(&r).unwrap();
        let (psi, se) = cell_are(&dgp.probs, CELLS, &[7.0; CELLS], &q).unwrap();
        assert!(psi.abs() < 1e-9 && se < 1e-9);
    }

    #[test]
    fn truth_stable_across_draw_counts() {
        let cfg = |b| Dgp2dConfig { truth_draws: b, large_sample: 1000, ..Dgp2dConfig::default() };
        let small = Dgp2d::new(cfg(100_000)).unwrap();
        let big = Dgp2d::new(cfg(400_000)).unwrap();
        let r = grid_rectangle(4, 5, 4, 5).unwrap();
        let (a, sa) = truth_2d(&r, &small).unwrap();
        let (b, sb) = truth_2d(&r, &big).unwrap();
        assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
        assert_eq!(small.true_region(), big.true_region());
    }

    #[test]
    fn true_region_is_maximal_and_populated() {
        let dgp = small();
        let psi = dgp.oracle_truth();
        assert!(psi.is_finite());
        for r in [grid_rectangle(5, 5, 5, 5).unwrap(), grid_rectangle(4, 5, 4, 5).unwrap(), grid_rectangle(1, 2, 1, 5).unwrap()] {
            assert!(dgp.region_truth(&r).unwrap() <= psi + 1e-12);
        }
        let s = dgp.generate(200, 3).unwrap();
        assert!(dgp.true_region().evaluate_dataset(&s.data).unwrap().iter().any(|&b| b));
        let c = dgp.confusion(dgp.true_region()).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert!(c.tp > 0);
    }

    #[test]
    fn full_grid_rejected() {
        assert!(grid_rectangle(1, 5, 1, 5).is_err());
        assert_eq!(grid_rectangle(5, 5, 5, 5).unwrap().canonical(), "A1 >= 4.5 & A2 >= 4.5");
    }
}

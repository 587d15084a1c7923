//! Study driver: iterations × sample sizes, resumable through an atomically
//! rewritten checkpoint, emitting long-format metrics and a summary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_run, summarize, EvalRecord, SummaryRow};
use super::{Dgp, Dgp2d, Dgp2dConfig, Dgp3d, Dgp3dConfig};
use crate::cross::{run_analysis, AnalysisOptions, SCHEMA_VERSION};
use crate::error::{invalid, Result};
use crate::par::{current_threads, map_indexed};
use crate::region::RectRegion;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DgpKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySpec {
    pub dgp: DgpKind,
    pub sample_sizes: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
    /// Analysis settings; `k` defaults to 5 and the marginal analysis is off.
    pub analysis: AnalysisOptions,
    pub dgp2d: Dgp2dConfig,
    pub dgp3d: Dgp3dConfig,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            dgp: DgpKind::TwoD,
            sample_sizes: vec![200, 1000, 5000],
            iterations: 50,
            seed: 1,
            analysis: AnalysisOptions { k: 5, run_marginal: false, ..AnalysisOptions::default() },
            dgp2d: Dgp2dConfig::default(),
            dgp3d: Dgp3dConfig::default(),
        }
    }
}

impl StudySpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() || self.iterations == 0 {
            return Err(invalid("study needs at least one sample size and one iteration"));
        }
        self.analysis.validate()
    }

    pub fn build_dgp(&self) -> Result<Box<dyn Dgp>> {
        Ok(match self.dgp {
            DgpKind::TwoD => Box::new(Dgp2d::new(self.dgp2d.clone())?),
            DgpKind::ThreeD => Box::new(Dgp3d::new(self.dgp3d.clone())?),
        })
    }
}

pub fn iteration_seed(seed: u64, n: usize, iteration: usize) -> u64 {
    derive_seed(derive_seed(seed, n as u64), iteration as u64)
}

/// Draw one sample, analyze it and score it.
pub fn run_iteration(dgp: &dyn Dgp, n: usize, iteration: usize, seed: u64, analysis: &AnalysisOptions) -> Result<Vec<EvalRecord>> {
    let s = iteration_seed(seed, n, iteration);
    let sample = dgp.generate(n, derive_seed(s, 0))?;
    let opts = AnalysisOptions { seed: derive_seed(s, 1), ..analysis.clone() };
    let report = run_analysis(&sample.data, &opts)?;
    evaluate_run(&report, dgp, iteration)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    schema_version: String,
    spec: StudySpec,
    records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub schema_version: String,
    pub dgp: DgpKind,
    pub spec: StudySpec,
    pub oracle_truth: f64,
    pub true_region: RectRegion,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub records: Vec<EvalRecord>,
    pub summary: StudySummary,
    /// Iterations computed in this call (the rest came from the checkpoint).
    pub computed: usize,
}

/// Write through a temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

pub fn metrics_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "iteration", "estimator", "target", "metric", "value"])?;
    for r in records {
        let c = r.confusion;
        let metrics: [(&str, f64); 18] = [
            ("estimate", r.estimate),
            ("se", r.se),
            ("ci_lower", r.ci_lower),
            ("ci_upper", r.ci_upper),
            ("truth", r.truth),
            ("bias", r.bias),
            ("sqrt_n_bias", r.sqrt_n_bias),
            ("variance", r.variance),
            ("mse", r.mse),
            ("n_mse", r.n_mse),
            ("covered", f64::from(u8::from(r.covered))),
            ("no_discovery", f64::from(u8::from(r.no_discovery))),
            ("tp", c.map_or(f64::NAN, |c| c.tp as f64)),
            ("tn", c.map_or(f64::NAN, |c| c.tn as f64)),
            ("fp", c.map_or(f64::NAN, |c| c.fp as f64)),
            ("fn", c.map_or(f64::NAN, |c| c.fn_ as f64)),
            ("tpr", c.map_or(f64::NAN, |c| c.tpr())),
            ("tnr", c.map_or(f64::NAN, |c| c.tnr())),
        ];
        for (name, v) in metrics {
            w.write_record([
                r.n.to_string(),
                r.iteration.to_string(),
                r.estimator.as_str().to_string(),
                r.target.as_str().to_string(),
                name.to_string(),
                fmt_value(v),
            ])?;
        }
    }
    w.into_inner().map_err(|e| invalid(format!("csv buffer: {e}")))
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.json")
}

/// Run (or resume) a study, writing `metrics.csv`, `summary.json` and the checkpoint into `out_dir`.
pub fn run_study(spec: &StudySpec, out_dir: &Path) -> Result<StudyOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let dgp = spec.build_dgp()?;
    let ck_path = checkpoint_path(out_dir);
    let mut records: Vec<EvalRecord> = if ck_path.exists() {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(&ck_path)?)?;
        if ck.spec != *spec {
            return Err(invalid(format!("checkpoint {} belongs to a different study spec", ck_path.display())));
        }
        ck.records
    } else {
        Vec::new()
    };
    let done: BTreeSet<(usize, usize)> = records.iter().map(|r| (r.n, r.iteration)).collect();
    let pending: Vec<(usize, usize)> = spec
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..spec.iterations).map(move |i| (n, i)))
        .filter(|key| !done.contains(key))
        .collect();
    let chunk = current_threads(spec.analysis.parallelism).max(1);
    let mut computed = 0;
    for batch in pending.chunks(chunk) {
        let results = map_indexed(spec.analysis.parallelism, batch.len(), |j| {
            let (n, it) = batch[j];
            run_iteration(dgp.as_ref(), n, it, spec.seed, &spec.analysis)
        });
        for (res, &(n, it)) in results.into_iter().zip(batch) {
            let recs = res?;
            log::info!("{} n={n} iteration={it} done", dgp.label());
            records.extend(recs);
            computed += 1;
        }
        let ck = Checkpoint { schema_version: SCHEMA_VERSION.into(), spec: spec.clone(), records: records.clone() };
        write_atomic(&ck_path, &serde_json::to_vec(&ck)?)?;
    }
    records.sort_by(|a, b| (a.n, a.iteration, a.estimator, a.target).cmp(&(b.n, b.iteration, b.estimator, b.target)));
    let summary = StudySummary {
        schema_version: SCHEMA_VERSION.into(),
        dgp: spec.dgp,
        spec: spec.clone(),
        oracle_truth: dgp.oracle_truth(),
        true_region: dgp.true_region().clone(),
        rows: summarize(&records),
    };
    write_atomic(&out_dir.join("metrics.csv"), &metrics_csv(&records)?)?;
    write_atomic(&out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(StudyOutcome { records, summary, computed })
}

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use region_tmle::cross::AnalysisOptions;
use region_tmle::learners::{default_library, super_learn, Family, ForestParams, LearnerSpec, RandomForest, SlMode};
use region_tmle::sim::{Dgp, Dgp2d, Dgp2dConfig};
use region_tmle::{run_analysis, Dataset, Parallelism};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn sample(n: usize) -> Dataset {
    let dgp = Dgp2d::new(Dgp2dConfig { truth_draws: 5_000, large_sample: 5_000, ..Dgp2dConfig::default() }).unwrap();
    dgp.generate(n, 1).unwrap().data
}

fn forest(c: &mut Criterion) {
    let data = sample(2000);
    let y = data.y.to_vec();
    let params = ForestParams { n_trees: 100, ..ForestParams::default() };
    let mut g = c.benchmark_group("random_forest_fit");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| RandomForest::fit(data.w.view(), &y, &params, 7, mode).unwrap())
        });
    }
    g.finish();
}

fn super_learner(c: &mut Criterion) {
    let data = sample(2000);
    let y = data.y.to_vec();
    let lib = default_library();
    let mut g = c.benchmark_group("super_learner");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| super_learn(&lib, data.w.view(), &y, None, 5, SlMode::Discrete, Family::Identity, 3, mode).unwrap())
        });
    }
    g.finish();
}

fn analysis(c: &mut Criterion) {
    let data = sample(500);
    let mut g = c.benchmark_group("run_analysis");
    g.sample_size(10);
    for (name, mode) in MODES {
        let mut opts = AnalysisOptions { k: 5, run_marginal: false, parallelism: mode, ..AnalysisOptions::default() };
        opts.library = vec![LearnerSpec::Glm, LearnerSpec::Mean];
        opts.backfit.max_iter = 3;
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_analysis(&data, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forest, super_learner, analysis);
criterion_main!(benches);

//! `region-tmle analyze` runs the cross-estimated region analysis on a CSV;
//! `region-tmle simulate` runs the simulation study with checkpointing.

mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{AnalysisConfig, ConfigError};
use region_tmle::cross::{write_kfold_csv, write_pooled_csv, AnalysisOptions, SCHEMA_VERSION};
use region_tmle::par::with_threads;
use region_tmle::rules::Direction;
use region_tmle::sim::harness::{run_study, write_atomic, DgpKind, StudySpec};
use region_tmle::{run_analysis, Dataset, Error, Parallelism};

const EXIT_SCHEMA: u8 = 2;
const EXIT_ANALYSIS: u8 = 3;

#[derive(Parser)]
#[command(name = "region-tmle", version, about = "Discover exposure regions and estimate their average regional effect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the K-fold region analysis on a CSV file.
    Analyze(AnalyzeArgs),
    /// Run (or resume) a simulation study.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// TOML config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (also settable through REGION_TMLE_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long, value_delimiter = ',')]
    exposures: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    g_min: Option<f64>,
    /// Worker threads (1 = sequential, 0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    stability_threshold: Option<f64>,
    /// Skip the single-exposure analysis.
    #[arg(long)]
    no_marginal: bool,
    /// Skip the joint (mixture) analysis.
    #[arg(long)]
    no_joint: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Max,
    Min,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML study spec; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dgp: Option<DgpArg>,
    /// Comma-separated sample sizes.
    #[arg(long = "n", value_delimiter = ',')]
    sample_sizes: Vec<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DgpArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn schema(message: impl ToString) -> Self {
        Failure { code: EXIT_SCHEMA, message: message.to_string() }
    }

    fn analysis(message: impl ToString) -> Self {
        Failure { code: EXIT_ANALYSIS, message: message.to_string() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::schema(e)
    }
}

/// Input problems map to the schema exit code, everything else to analysis failure.
fn classify(e: Error) -> Failure {
    match e {
        Error::Schema(_) | Error::MissingColumn(_) | Error::NonNumeric { .. } | Error::MissingValue { .. } | Error::Csv(_) => {
            Failure::schema(e)
        }
        other => Failure::analysis(other),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: &'static str,
    command: &'static str,
    cli_version: &'static str,
    library_version: &'static str,
    config: &'a AnalysisConfig,
    options: &'a AnalysisOptions,
    data: &'a Path,
    n: usize,
    outputs: [&'static str; 3],
}

fn analyze(args: AnalyzeArgs) -> Result<PathBuf, Failure> {
    let file = match &args.config {
        Some(p) => AnalysisConfig::load(p)?,
        None => AnalysisConfig::default(),
    };
    let flags = AnalysisConfig {
        data: args.data,
        out_dir: None,
        outcome: args.outcome,
        exposures: args.exposures,
        covariates: args.covariates,
        weights: args.weights,
        k: args.k,
        direction: args.direction.map(|d| match d {
            DirectionArg::Max => Direction::Max,
            DirectionArg::Min => Direction::Min,
        }),
        seed: args.seed,
        delta: args.delta,
        max_iter: args.max_iter,
        g_min: args.g_min,
        threads: args.threads,
        stability_threshold: args.stability_threshold,
        joint: args.no_joint.then_some(false),
        marginal: args.no_marginal.then_some(false),
        library: None,
    };
    let cfg = file.merge(flags);
    let out_dir = cfg.resolve_out_dir(args.out.as_deref());
    let data_path = cfg.data.clone().ok_or(ConfigError::Missing("data"))?;
    let roles = cfg.roles()?;
    let data = Dataset::from_csv_path(&data_path, &roles).map_err(|e| match e {
        Error::Io(io) => Failure::schema(format!("cannot read {}: {io}", data_path.display())),
        other => classify(other),
    })?;
    let opts = cfg.options();
    opts.validate().map_err(|e| Failure::schema(format!("invalid configuration: {e}")))?;

    log::info!("analyzing {} rows from {}", data.n(), data_path.display());
    let report = with_threads(cfg.threads.unwrap_or(0), || run_analysis(&data, &opts)).map_err(classify)?;

    fs::create_dir_all(&out_dir).map_err(Failure::analysis)?;
    let io = |e: Error| Failure::analysis(e);
    write_atomic(&out_dir.join("report.json"), report.to_json().map_err(io)?.as_bytes()).map_err(io)?;
    let csv_file = |name: &str| File::create(out_dir.join(name)).map(BufWriter::new).map_err(Failure::analysis);
    write_pooled_csv(&report, csv_file("pooled.csv")?).map_err(io)?;
    write_kfold_csv(&report, csv_file("kfold.csv")?).map_err(io)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: "analyze",
        cli_version: env!("CARGO_PKG_VERSION"),
        library_version: region_tmle::VERSION,
        config: &cfg,
        options: &opts,
        data: &data_path,
        n: data.n(),
        outputs: ["report.json", "pooled.csv", "kfold.csv"],
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Failure::analysis)?;
    write_atomic(&out_dir.join("manifest.json"), text.as_bytes()).map_err(io)?;
    Ok(out_dir)
}

fn simulate(args: SimulateArgs) -> Result<PathBuf, Failure> {
    let mut spec: StudySpec = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::schema(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::schema(format!("invalid study spec {}: {e}", p.display())))?
        }
        None => StudySpec::default(),
    };
    if let Some(d) = args.dgp {
        spec.dgp = match d {
            DgpArg::TwoD => DgpKind::TwoD,
            DgpArg::ThreeD => DgpKind::ThreeD,
        };
    }
    if !args.sample_sizes.is_empty() {
        spec.sample_sizes = args.sample_sizes;
    }
    if let Some(i) = args.iterations {
        spec.iterations = i;
    }
    if let Some(k) = args.k {
        spec.analysis.k = k;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if args.threads == Some(1) {
        spec.analysis.parallelism = Parallelism::Sequential;
    }
    spec.validate().map_err(|e| Failure::schema(format!("invalid study spec: {e}")))?;
    let out_dir = args
        .out
        .or_else(|| std::env::var_os(config::OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("region_tmle_sim"));
    let outcome = with_threads(args.threads.unwrap_or(0), || run_study(&spec, &out_dir)).map_err(Failure::analysis)?;
    log::info!("{} iterations computed, {} records", outcome.computed, outcome.records.len());
    Ok(out_dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(s) => simulate(s),
    };
    match result {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_region-tmle");

const FAST_LIBRARY: &str = r#"
[[library]]
kind = "mean"

[[library]]
kind = "glm"
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("REGION_TMLE_OUT_DIR").output().expect("binary runs")
}

/// Tiny LCG so the fixture does not depend on the library's RNG.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Mixture data laid out like the NIEHS synthetic set: seven exposures, one
/// confounder and padding covariates, with an interaction between X1 and X2.
fn niehs_like(n: usize, seed: u64) -> String {
    let mut r = Lcg(seed);
    let mut s = String::from("y,X1,X2,X3,X4,X5,X6,X7,Z,pad1,pad2\n");
    for _ in 0..n {
        let z = f64::from(u8::from(r.next() < 0.5));
        let x: Vec<f64> = (0..7).map(|_| r.next() + 0.3 * z).collect();
        let y = 1.0 + 4.0 * f64::from(u8::from(x[0] > 0.6 && x[1] > 0.6)) + 0.5 * z + (r.next() - 0.5);
        write!(s, "{y:.5}").unwrap();
        for v in &x {
            write!(s, ",{v:.5}").unwrap();
        }
        writeln!(s, ",{z},{:.4},{:.4}", r.next(), r.next()).unwrap();
    }
    s
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = format!(
        r#"
data = "data.csv"
outcome = "y"
exposures = ["X1", "X2", "X3", "X4", "X5", "X6", "X7"]
covariates = ["Z", "pad1", "pad2"]
k = 3
seed = 11
max_iter = 2
{extra}
{FAST_LIBRARY}
"#
    );
    let p = dir.join("analysis.toml");
    fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn missing_outcome_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.csv"), niehs_like(50, 1).replace("y,", "outcome,")).unwrap();
    write_config(dir.path(), "");
    let out = run(&["analyze", "--config", "analysis.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`y`"), "{err}");
}

#[test]
fn non_numeric_cell_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = niehs_like(20, 2);
    let line = csv.lines().nth(3).unwrap().to_string();
    let mut parts: Vec<&str> = line.split(',').collect();
    parts[1] = "abc";
    let bad = parts.join(",");
    csv = csv.replace(&line, &bad);
    fs::write(dir.path().join("data.csv"), csv).unwrap();
    write_config(dir.path(), "");
    let out = run(&["analyze", "--config", "analysis.toml", "--out", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3") && err.contains("`X1`"), "{err}");
}

#[test]
fn analyze_is_deterministic_and_writes_niehs_layout() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.csv"), niehs_like(300, 3)).unwrap();
    write_config(dir.path(), "");
    let a = run(&["analyze", "--config", "analysis.toml", "--out", "a"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&["analyze", "--config", "analysis.toml", "--out", "b", "--threads", "2"], dir.path());
    assert!(b.status.success());
    let read = |d: &str, f: &str| fs::read_to_string(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "report.json"), read("b", "report.json"));

    let pooled = read("a", "pooled.csv");
    let mut lines = pooled.lines();
    assert_eq!(lines.next().unwrap(), "type,are,se,lower_ci,upper_ci,p_value,p_value_adj,vars,union_rule,fold_pct");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert!(!rows.is_empty());
    for row in &rows {
        assert_eq!(row.len(), 10, "{row:?}");
        assert!(row[0] == "joint" || row[0] == "marginal", "{row:?}");
        let pct: f64 = row[9].parse().unwrap();
        assert!((0.0..=100.0).contains(&pct));
    }
    let kfold = read("a", "kfold.csv");
    assert!(kfold.starts_with("fold,vars,rule,are,se,lower_ci,upper_ci,p_value,skipped"));

    let manifest: serde_json::Value = serde_json::from_str(&read("a", "manifest.json")).unwrap();
    assert_eq!(manifest["schema_version"], "1");
    assert_eq!(manifest["options"]["seed"], 11);
    assert_eq!(manifest["n"], 300);
    let report: serde_json::Value = serde_json::from_str(&read("a", "report.json")).unwrap();
    assert_eq!(report["schema_version"], "1");
}

#[test]
fn flags_override_config_and_env_sets_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.csv"), niehs_like(120, 4)).unwrap();
    write_config(dir.path(), "marginal = false");
    let out = Command::new(BIN)
        .args(["analyze", "--config", "analysis.toml", "--k", "2", "--seed", "5"])
        .current_dir(dir.path())
        .env("REGION_TMLE_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("from_env/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["options"]["k"], 2);
    assert_eq!(m["options"]["seed"], 5);
    assert_eq!(m["options"]["run_marginal"], false);
}

#[test]
fn invalid_k_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.csv"), niehs_like(40, 5)).unwrap();
    write_config(dir.path(), "");
    let out = run(&["analyze", "--config", "analysis.toml", "--k", "1", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_shape_resume_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = format!(
        r#"
dgp = "2d"
sample_sizes = [200]
iterations = 2
seed = 3

[analysis]
k = 5
run_marginal = false
{}

[analysis.backfit]
max_iter = 2
h_library = [{{ kind = "glm" }}]

[dgp2d]
truth_draws = 5000
large_sample = 20000
"#,
        FAST_LIBRARY.replace("[[library]]", "[[analysis.library]]")
    );
    fs::write(dir.path().join("study.toml"), spec).unwrap();
    let a = run(&["simulate", "--config", "study.toml", "--out", "a"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let metrics = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let mut groups = std::collections::BTreeSet::new();
    for line in metrics.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        groups.insert((f[1].to_string(), f[2].to_string(), f[3].to_string()));
    }
    // 2 iterations × 3 estimators × 2 targets.
    assert_eq!(groups.len(), 12);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/summary.json")).unwrap()).unwrap();
    let row = summary["rows"].as_array().unwrap().iter().find(|r| r["estimator"] == "mean_kfold").unwrap();
    for key in ["abs_bias", "sd", "mse", "coverage"] {
        assert!(row.get(key).is_some(), "{key}");
    }

    // Rerun: resumes from the checkpoint and reproduces the same metrics.
    let again = run(&["simulate", "--config", "study.toml", "--out", "a"], dir.path());
    assert!(again.status.success());
    assert_eq!(metrics, fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap());
    let b = run(&["simulate", "--config", "study.toml", "--out", "b"], dir.path());
    assert!(b.status.success());
    assert_eq!(metrics, fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap());

    // A different spec against the same checkpoint is refused.
    let c = run(&["simulate", "--config", "study.toml", "--out", "a", "--seed", "4"], dir.path());
    assert_eq!(c.status.code(), Some(3));
}

//! Analysis configuration: a flat TOML document, overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use region_tmle::cross::AnalysisOptions;
use region_tmle::learners::LearnerSpec;
use region_tmle::rules::Direction;
use region_tmle::{ColumnRoles, Parallelism};

pub const OUT_DIR_ENV: &str = "REGION_TMLE_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("config is missing `{0}`")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub outcome: Option<String>,
    #[serde(default)]
    pub exposures: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub weights: Option<String>,
    pub k: Option<usize>,
    pub direction: Option<Direction>,
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub max_iter: Option<usize>,
    pub g_min: Option<f64>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    pub threads: Option<usize>,
    pub stability_threshold: Option<f64>,
    pub joint: Option<bool>,
    pub marginal: Option<bool>,
    /// Nuisance and covariate-side learners, e.g. `[[library]] kind = "glm"`.
    pub library: Option<Vec<LearnerSpec>>,
}

impl AnalysisConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    /// Fields set in `over` replace ours.
    pub fn merge(self, over: AnalysisConfig) -> AnalysisConfig {
        let pick_vec = |a: Vec<String>, b: Vec<String>| if b.is_empty() { a } else { b };
        AnalysisConfig {
            data: over.data.or(self.data),
            out_dir: over.out_dir.or(self.out_dir),
            outcome: over.outcome.or(self.outcome),
            exposures: pick_vec(self.exposures, over.exposures),
            covariates: pick_vec(self.covariates, over.covariates),
            weights: over.weights.or(self.weights),
            k: over.k.or(self.k),
            direction: over.direction.or(self.direction),
            seed: over.seed.or(self.seed),
            delta: over.delta.or(self.delta),
            max_iter: over.max_iter.or(self.max_iter),
            g_min: over.g_min.or(self.g_min),
            threads: over.threads.or(self.threads),
            stability_threshold: over.stability_threshold.or(self.stability_threshold),
            joint: over.joint.or(self.joint),
            marginal: over.marginal.or(self.marginal),
            library: over.library.or(self.library),
        }
    }

    pub fn roles(&self) -> Result<ColumnRoles, ConfigError> {
        Ok(ColumnRoles {
            outcome: self.outcome.clone().ok_or(ConfigError::Missing("outcome"))?,
            exposures: self.exposures.clone(),
            covariates: self.covariates.clone(),
            weights: self.weights.clone(),
        })
    }

    /// Output directory: flag or config file, then the environment, then `./region_tmle_out`.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("region_tmle_out"))
    }

    pub fn options(&self) -> AnalysisOptions {
        let mut o = AnalysisOptions::default();
        if let Some(k) = self.k {
            o.k = k;
        }
        if let Some(d) = self.direction {
            o.direction = d;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
        if let Some(d) = self.delta {
            o.backfit.delta = d;
        }
        if let Some(m) = self.max_iter {
            o.backfit.max_iter = m;
        }
        if let Some(g) = self.g_min {
            o.g_min = g;
        }
        if let Some(t) = self.stability_threshold {
            o.stability_threshold = t;
        }
        if let Some(j) = self.joint {
            o.run_joint = j;
        }
        if let Some(m) = self.marginal {
            o.run_marginal = m;
        }
        if let Some(lib) = &self.library {
            o.library = lib.clone();
            o.backfit.h_library = lib.clone();
        }
        if self.threads == Some(1) {
            o.parallelism = Parallelism::Sequential;
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: AnalysisConfig = toml::from_str(
            r#"
            outcome = "y"
            exposures = ["a1", "a2"]
            k = 10
            seed = 3
            direction = "min"

            [[library]]
            kind = "glm"

            [[library]]
            kind = "random_forest"
            n_trees = 20
            "#,
        )
        .unwrap();
        let flags = AnalysisConfig { k: Some(4), exposures: vec!["a3".into()], ..Default::default() };
        let c = file.merge(flags);
        assert_eq!(c.k, Some(4));
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.exposures, vec!["a3".to_string()]);
        let o = c.options();
        assert_eq!(o.direction, Direction::Min);
        assert_eq!(o.library.len(), 2);
        assert!(matches!(&o.library[1], LearnerSpec::RandomForest(f) if f.n_trees == 20));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<AnalysisConfig>("outcom = \"y\"").is_err());
    }

    #[test]
    fn missing_outcome_reported() {
        let c = AnalysisConfig::default();
        assert!(matches!(c.roles(), Err(ConfigError::Missing("outcome"))));
    }
}

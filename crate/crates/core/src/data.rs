//! Observed data `(W, A, Y)` and CSV ingestion.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub exposures: Vec<String>,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub weights: Option<String>,
}

impl ColumnRoles {
    pub fn validate(&self) -> Result<()> {
        if self.exposures.is_empty() {
            return Err(invalid("at least one exposure column is required"));
        }
        let mut seen = HashSet::new();
        let all = std::iter::once(&self.outcome)
            .chain(&self.exposures)
            .chain(&self.covariates)
            .chain(self.weights.iter());
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!(
                    "column `{name}` is assigned more than one role"
                )));
            }
        }
        Ok(())
    }
}

/// `n` complete observations of covariates `w`, exposures `a` and outcome `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub w: Array2<f64>,
    pub a: Array2<f64>,
    pub y: Array1<f64>,
    pub w_names: Vec<String>,
    pub a_names: Vec<String>,
    pub y_name: String,
    pub weights: Option<Array1<f64>>,
}

impl Dataset {
    pub fn new(
        w: Array2<f64>,
        a: Array2<f64>,
        y: Array1<f64>,
        w_names: Vec<String>,
        a_names: Vec<String>,
        y_name: impl Into<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            w,
            a,
            y,
            w_names,
            a_names,
            y_name: y_name.into(),
            weights: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_weights(mut self, weights: Array1<f64>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.w.nrows() != n || self.a.nrows() != n {
            return Err(Error::Schema(format!(
                "row counts differ: y={n}, w={}, a={}",
                self.w.nrows(),
                self.a.nrows()
            )));
        }
        if self.w.ncols() != self.w_names.len() || self.a.ncols() != self.a_names.len() {
            return Err(Error::Schema("column names do not match matrix widths".into()));
        }
        if self.a_names.is_empty() {
            return Err(Error::Schema("no exposure columns".into()));
        }
        let mut seen = HashSet::new();
        for name in self
            .w_names
            .iter()
            .chain(&self.a_names)
            .chain(std::iter::once(&self.y_name))
        {
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate column name `{name}`")));
            }
        }
        let finite = |v: &f64| v.is_finite();
        if !self.y.iter().all(finite) || !self.w.iter().all(finite) || !self.a.iter().all(finite)
        {
            return Err(Error::Schema("dataset contains missing or non-finite values".into()));
        }
        if let Some(wt) = &self.weights {
            if wt.len() != n || wt.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::Schema("weights must be positive, finite and length n".into()));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn weights_or_ones(&self) -> Array1<f64> {
        self.weights.clone().unwrap_or_else(|| Array1::ones(self.n()))
    }

    pub fn exposure_index(&self, name: &str) -> Option<usize> {
        self.a_names.iter().position(|n| n == name)
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            w: self.w.select(Axis(0), idx),
            a: self.a.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            w_names: self.w_names.clone(),
            a_names: self.a_names.clone(),
            y_name: self.y_name.clone(),
            weights: self.weights.as_ref().map(|w| w.select(Axis(0), idx)),
        }
    }

    /// Design matrix `[indicator, W]` used by outcome regressions.
    pub fn treatment_design(&self, indicator: &[f64]) -> Array2<f64> {
        let n = self.n();
        let p = self.w.ncols();
        let mut x = Array2::zeros((n, p + 1));
        for i in 0..n {
            x[[i, 0]] = indicator[i];
            for j in 0..p {
                x[[i, j + 1]] = self.w[[i, j]];
            }
        }
        x
    }

    pub fn from_csv_path(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, roles)
    }

    /// Parse a headed CSV. Missing cells and non-numeric values are rejected
    /// with their 1-based data row and column name.
    pub fn from_csv_reader<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
        roles.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let position: HashMap<&str, usize> =
            headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
        let locate = |name: &String| -> Result<usize> {
            position
                .get(name.as_str())
                .copied()
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        };
        let y_col = locate(&roles.outcome)?;
        let a_cols = roles.exposures.iter().map(locate).collect::<Result<Vec<_>>>()?;
        let w_cols = roles.covariates.iter().map(locate).collect::<Result<Vec<_>>>()?;
        let wt_col = roles.weights.as_ref().map(locate).transpose()?;

        let mut y = Vec::new();
        let mut a = Vec::new();
        let mut w = Vec::new();
        let mut wt = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let row = row + 1;
            let cell = |col: usize| -> Result<f64> {
                let raw = record.get(col).unwrap_or("");
                let column = headers.get(col).unwrap_or("").to_string();
                if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                    return Err(Error::MissingValue { row, column });
                }
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::NonNumeric { row, column, value: raw.to_string() })
            };
            y.push(cell(y_col)?);
            for &c in &a_cols {
                a.push(cell(c)?);
            }
            for &c in &w_cols {
                w.push(cell(c)?);
            }
            if let Some(c) = wt_col {
                wt.push(cell(c)?);
            }
        }
        let n = y.len();
        let a = Array2::from_shape_vec((n, a_cols.len()), a).map_err(|e| Error::Schema(e.to_string()))?;
        let w = Array2::from_shape_vec((n, w_cols.len()), w).map_err(|e| Error::Schema(e.to_string()))?;
        let ds = Dataset::new(
            w,
            a,
            Array1::from(y),
            roles.covariates.clone(),
            roles.exposures.clone(),
            roles.outcome.clone(),
        )?;
        if wt_col.is_some() {
            ds.with_weights(Array1::from(wt))
        } else {
            Ok(ds)
        }
    }
}

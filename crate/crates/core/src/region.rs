//! Rectangular exposure regions.
//!
//! A [`RectRegion`] is a conjunction of per-exposure interval constraints.
//! Trees emit `x >= cut` (closed) lower bounds and `x < cut` (open) upper
//! bounds; unions keep whichever flag is more inclusive.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub var: String,
    /// `None` is −∞.
    pub lower: Option<f64>,
    pub lower_closed: bool,
    /// `None` is +∞.
    pub upper: Option<f64>,
    pub upper_closed: bool,
}

impl Clause {
    pub fn unbounded(var: impl Into<String>) -> Self {
        Clause {
            var: var.into(),
            lower: None,
            lower_closed: false,
            upper: None,
            upper_closed: false,
        }
    }

    pub fn at_least(var: impl Into<String>, lo: f64) -> Self {
        Clause { lower: Some(lo), lower_closed: true, ..Clause::unbounded(var) }
    }

    pub fn greater_than(var: impl Into<String>, lo: f64) -> Self {
        Clause { lower: Some(lo), lower_closed: false, ..Clause::unbounded(var) }
    }

    pub fn less_than(var: impl Into<String>, hi: f64) -> Self {
        Clause { upper: Some(hi), upper_closed: false, ..Clause::unbounded(var) }
    }

    pub fn at_most(var: impl Into<String>, hi: f64) -> Self {
        Clause { upper: Some(hi), upper_closed: true, ..Clause::unbounded(var) }
    }

    pub fn between(var: impl Into<String>, lo: f64, hi: f64) -> Self {
        Clause {
            lower: Some(lo),
            lower_closed: true,
            upper: Some(hi),
            upper_closed: false,
            var: var.into(),
        }
    }

    pub fn with_closedness(mut self, lower_closed: bool, upper_closed: bool) -> Self {
        self.lower_closed = lower_closed;
        self.upper_closed = upper_closed;
        self
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = match self.lower {
            None => true,
            Some(lo) if self.lower_closed => x >= lo,
            Some(lo) => x > lo,
        };
        let below = match self.upper {
            None => true,
            Some(hi) if self.upper_closed => x <= hi,
            Some(hi) => x < hi,
        };
        above && below
    }

    fn is_valid(&self) -> bool {
        match (self.lower, self.upper) {
            (Some(lo), Some(hi)) => lo < hi && lo.is_finite() && hi.is_finite(),
            (Some(v), None) | (None, Some(v)) => v.is_finite(),
            (None, None) => true,
        }
    }

    /// Tighten with another constraint on the same variable.
    fn intersect(&mut self, other: &Clause) {
        if let Some(lo) = other.lower {
            match self.lower {
                Some(cur) if cur > lo || (cur == lo && !self.lower_closed) => {}
                Some(cur) if cur == lo => self.lower_closed = other.lower_closed,
                _ => {
                    self.lower = Some(lo);
                    self.lower_closed = other.lower_closed;
                }
            }
        }
        if let Some(hi) = other.upper {
            match self.upper {
                Some(cur) if cur < hi || (cur == hi && !self.upper_closed) => {}
                Some(cur) if cur == hi => self.upper_closed = other.upper_closed,
                _ => {
                    self.upper = Some(hi);
                    self.upper_closed = other.upper_closed;
                }
            }
        }
    }

    /// Widen to cover another clause on the same variable.
    fn hull(&mut self, other: &Clause) {
        self.lower = match (self.lower, other.lower) {
            (Some(a), Some(b)) => match a.partial_cmp(&b) {
                Some(Ordering::Greater) => {
                    self.lower_closed = other.lower_closed;
                    Some(b)
                }
                Some(Ordering::Equal) => {
                    self.lower_closed |= other.lower_closed;
                    Some(a)
                }
                _ => Some(a),
            },
            _ => {
                self.lower_closed = false;
                None
            }
        };
        self.upper = match (self.upper, other.upper) {
            (Some(a), Some(b)) => match a.partial_cmp(&b) {
                Some(Ordering::Less) => {
                    self.upper_closed = other.upper_closed;
                    Some(b)
                }
                Some(Ordering::Equal) => {
                    self.upper_closed |= other.upper_closed;
                    Some(a)
                }
                _ => Some(a),
            },
            _ => {
                self.upper_closed = false;
                None
            }
        };
    }

    fn fmt_parts(&self) -> Vec<String> {
        let mut parts = Vec::new();
        if let Some(lo) = self.lower {
            let op = if self.lower_closed { ">=" } else { ">" };
            parts.push(format!("{} {} {}", self.var, op, fmt_sig(lo)));
        }
        if let Some(hi) = self.upper {
            let op = if self.upper_closed { "<=" } else { "<" };
            parts.push(format!("{} {} {}", self.var, op, fmt_sig(hi)));
        }
        if parts.is_empty() {
            parts.push(format!("{} > -Inf", self.var));
        }
        parts
    }
}

/// Round to six significant digits and print the shortest representation.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.5e}").parse().unwrap_or(x);
    format!("{rounded}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectRegion {
    clauses: Vec<Clause>,
}

impl RectRegion {
    /// Build from clauses; several clauses on one variable are intersected.
    pub fn new(clauses: Vec<Clause>) -> Result<Self> {
        if clauses.is_empty() {
            return Err(Error::InvalidArgument("a region needs at least one clause".into()));
        }
        let mut by_var: BTreeMap<String, Clause> = BTreeMap::new();
        for c in clauses {
            match by_var.get_mut(&c.var) {
                Some(existing) => existing.intersect(&c),
                None => {
                    by_var.insert(c.var.clone(), c);
                }
            }
        }
        let clauses: Vec<Clause> = by_var.into_values().collect();
        if let Some(bad) = clauses.iter().find(|c| !c.is_valid()) {
            return Err(Error::InvalidArgument(format!(
                "empty or malformed interval for `{}`",
                bad.var
            )));
        }
        Ok(RectRegion { clauses })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    /// Sorted exposure names constrained by this region.
    pub fn varset(&self) -> Vec<String> {
        self.clauses.iter().map(|c| c.var.clone()).collect()
    }

    pub fn varset_label(&self) -> String {
        self.varset().join("-")
    }

    pub fn clause(&self, var: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.var == var)
    }

    /// Canonical text form, e.g. `A1 >= 2.5 & A2 < 4`.
    pub fn canonical(&self) -> String {
        self.clauses
            .iter()
            .flat_map(|c| c.fmt_parts())
            .collect::<Vec<_>>()
            .join(" & ")
    }

    pub fn contains_row(&self, row: &[f64], names: &[String]) -> Result<bool> {
        for c in &self.clauses {
            let j = names
                .iter()
                .position(|n| *n == c.var)
                .ok_or_else(|| Error::Schema(format!("unknown exposure `{}` in region", c.var)))?;
            if !c.contains(row[j]) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// 0/1 membership of every row of `a`.
    pub fn evaluate(&self, a: ArrayView2<'_, f64>, names: &[String]) -> Result<Vec<bool>> {
        let cols = self
            .clauses
            .iter()
            .map(|c| {
                names
                    .iter()
                    .position(|n| *n == c.var)
                    .ok_or_else(|| Error::Schema(format!("unknown exposure `{}` in region", c.var)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(a.rows()
            .into_iter()
            .map(|row| self.clauses.iter().zip(&cols).all(|(c, &j)| c.contains(row[j])))
            .collect())
    }

    pub fn evaluate_dataset(&self, data: &Dataset) -> Result<Vec<bool>> {
        self.evaluate(data.a.view(), &data.a_names)
    }

    /// Interval hull: per variable the smallest lower and largest upper bound.
    pub fn union(regions: &[RectRegion]) -> Result<RectRegion> {
        let (first, rest) = regions
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("union of zero regions".into()))?;
        let varset = first.varset();
        let mut clauses = first.clauses.clone();
        for r in rest {
            if r.varset() != varset {
                return Err(Error::InvalidArgument(format!(
                    "cannot union regions over {:?} and {:?}",
                    varset,
                    r.varset()
                )));
            }
            for (acc, c) in clauses.iter_mut().zip(&r.clauses) {
                acc.hull(c);
            }
        }
        Ok(RectRegion { clauses })
    }
}

impl fmt::Display for RectRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

pub fn indicator_f64(ind: &[bool]) -> Vec<f64> {
    ind.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

//! Greedy variance-reduction regression trees with a significance gate.
//!
//! A split is kept only when a Welch t-test between the two children passes
//! `alpha` after Bonferroni adjustment over the candidate cuts examined for
//! the winning variable (and over variables when `bonferroni` is set).

use ndarray::ArrayView2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};
use crate::region::{Clause, RectRegion};

pub const MAX_CUTS: usize = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Split significance level; `None` disables the gate.
    pub alpha: Option<f64>,
    pub bonferroni: bool,
    /// Features sampled per split (random forests); `None` uses all.
    pub max_features: Option<usize>,
    pub max_cuts: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 3,
            min_leaf: 10,
            alpha: Some(0.05),
            bonferroni: true,
            max_features: None,
            max_cuts: MAX_CUTS,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(invalid("tree max_depth must be at least 1"));
        }
        if self.min_leaf < 2 {
            return Err(invalid("tree min_leaf must be at least 2"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(invalid("tree alpha must lie in (0, 1]"));
            }
        }
        if self.max_cuts == 0 {
            return Err(invalid("tree max_cuts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
        n: usize,
    },
    Split {
        feature: usize,
        /// Rows with `x < threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
        value: f64,
        n: usize,
    },
}

impl Node {
    pub fn value(&self) -> f64 {
        match *self {
            Node::Leaf { value, .. } | Node::Split { value, .. } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    n_left: usize,
    cuts_tried: usize,
    t_stat: f64,
    df: f64,
}

struct Builder<'a, R> {
    x: ArrayView2<'a, f64>,
    target: &'a [f64],
    params: &'a TreeParams,
    rng: Option<&'a mut R>,
    nodes: Vec<Node>,
    buf: Vec<(f64, f64)>,
}

impl RegressionTree {
    /// Fit on all rows of `x`.
    pub fn fit(x: ArrayView2<'_, f64>, target: &[f64], params: &TreeParams) -> Result<Self> {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        Self::fit_rows::<rand_chacha::ChaCha8Rng>(x, target, &rows, params, None)
    }

    /// Fit on the listed rows (repeats allowed, as in a bootstrap sample).
    pub fn fit_rows<R: Rng>(
        x: ArrayView2<'_, f64>,
        target: &[f64],
        rows: &[usize],
        params: &TreeParams,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        params.validate()?;
        if target.len() != x.nrows() {
            return Err(invalid("tree target length differs from row count"));
        }
        if rows.is_empty() {
            return Err(invalid("cannot fit a tree on zero rows"));
        }
        let mut b = Builder {
            x,
            target,
            params,
            rng,
            nodes: Vec::new(),
            buf: Vec::with_capacity(rows.len()),
        };
        let mut rows = rows.to_vec();
        b.grow(&mut rows, 0);
        Ok(RegressionTree { nodes: b.nodes, n_features: x.ncols() })
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[feature] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.predict_row(s),
                None => self.predict_row(&r.to_vec()),
            })
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Path region of every node except the root, paired with its node index.
    pub fn node_regions(&self, names: &[String]) -> Vec<(usize, RectRegion)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::<Clause>::new())];
        while let Some((i, path)) = stack.pop() {
            if !path.is_empty() {
                if let Ok(r) = RectRegion::new(path.clone()) {
                    out.push((i, r));
                }
            }
            if let Node::Split { feature, threshold, left, right, .. } = self.nodes[i] {
                let name = &names[feature];
                let mut lp = path.clone();
                lp.push(Clause::less_than(name.clone(), threshold));
                let mut rp = path;
                rp.push(Clause::at_least(name.clone(), threshold));
                stack.push((right, rp));
                stack.push((left, lp));
            }
        }
        out.sort_by_key(|(i, _)| *i);
        out
    }

    /// Regions of the terminal leaves (empty for a single-leaf tree).
    pub fn leaf_regions(&self, names: &[String]) -> Vec<RectRegion> {
        self.node_regions(names)
            .into_iter()
            .filter(|(i, _)| matches!(self.nodes[*i], Node::Leaf { .. }))
            .map(|(_, r)| r)
            .collect()
    }
}

impl<R: Rng> Builder<'_, R> {
    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let n = rows.len();
        let mean = rows.iter().map(|&i| self.target[i]).sum::<f64>() / n as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean, n });
        if depth >= self.params.max_depth || n < 2 * self.params.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(rows) else {
            return id;
        };
        if !self.significant(&best) {
            return id;
        }
        let feature = best.feature;
        let threshold = best.threshold;
        let x = self.x;
        let mut lo = 0;
        for k in 0..n {
            if x[[rows[k], feature]] < threshold {
                rows.swap(lo, k);
                lo += 1;
            }
        }
        debug_assert_eq!(lo, best.n_left);
        let (l_rows, r_rows) = rows.split_at_mut(lo);
        let left = self.grow(l_rows, depth + 1);
        let right = self.grow(r_rows, depth + 1);
        self.nodes[id] = Node::Split { feature, threshold, left, right, value: mean, n };
        id
    }

    fn features(&mut self) -> Vec<usize> {
        let p = self.x.ncols();
        match (self.params.max_features, self.rng.as_deref_mut()) {
            (Some(m), Some(rng)) if m < p => {
                let mut f = index::sample(rng, p, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..p).collect(),
        }
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<Candidate> {
        let min_leaf = self.params.min_leaf;
        let n = rows.len();
        let total: f64 = rows.iter().map(|&i| self.target[i]).sum();
        let total_sq: f64 = rows.iter().map(|&i| self.target[i] * self.target[i]).sum();
        let mut best: Option<Candidate> = None;
        for feature in self.features() {
            self.buf.clear();
            self.buf.extend(rows.iter().map(|&i| (self.x[[i, feature]], self.target[i])));
            self.buf.sort_by(|a, b| a.0.total_cmp(&b.0));
            // Boundaries between distinct values that leave min_leaf rows on each side.
            let mut bounds = Vec::new();
            for k in min_leaf..=(n - min_leaf) {
                if self.buf[k - 1].0 < self.buf[k].0 {
                    bounds.push(k);
                }
            }
            if bounds.is_empty() {
                continue;
            }
            let cap = self.params.max_cuts;
            let bounds: Vec<usize> = if bounds.len() > cap {
                (0..cap)
                    .map(|q| bounds[((q as f64 + 0.5) * bounds.len() as f64 / cap as f64) as usize])
                    .collect()
            } else {
                bounds
            };
            let mut sum_l = 0.0;
            let mut sq_l = 0.0;
            let mut k_prev = 0;
            let mut feat_best: Option<(usize, f64, f64, f64)> = None;
            for &k in &bounds {
                for j in k_prev..k {
                    let t = self.buf[j].1;
                    sum_l += t;
                    sq_l += t * t;
                }
                k_prev = k;
                let nl = k as f64;
                let nr = (n - k) as f64;
                let sum_r = total - sum_l;
                let gain = sum_l * sum_l / nl + sum_r * sum_r / nr - total * total / n as f64;
                if feat_best.is_none_or(|(_, g, _, _)| gain > g) {
                    feat_best = Some((k, gain, sum_l, sq_l));
                }
            }
            let Some((k, gain, sum_l, sq_l)) = feat_best else { continue };
            if best.is_some_and(|b| gain <= b.gain) {
                continue;
            }
            let nl = k as f64;
            let nr = (n - k) as f64;
            let sum_r = total - sum_l;
            let sq_r = total_sq - sq_l;
            let (ml, mr) = (sum_l / nl, sum_r / nr);
            let vl = ((sq_l - nl * ml * ml) / (nl - 1.0)).max(0.0);
            let vr = ((sq_r - nr * mr * mr) / (nr - 1.0)).max(0.0);
            let se2 = vl / nl + vr / nr;
            let t_stat = if se2 > 0.0 {
                (mr - ml).abs() / se2.sqrt()
            } else if mr != ml {
                f64::INFINITY
            } else {
                0.0
            };
            let df = if se2 > 0.0 {
                let a = vl / nl;
                let b = vr / nr;
                let d = a * a / (nl - 1.0) + b * b / (nr - 1.0);
                if d > 0.0 { se2 * se2 / d } else { nl + nr - 2.0 }
            } else {
                nl + nr - 2.0
            };
            best = Some(Candidate {
                feature,
                threshold: 0.5 * (self.buf[k - 1].0 + self.buf[k].0),
                gain,
                n_left: k,
                cuts_tried: bounds.len(),
                t_stat,
                df,
            });
        }
        best.filter(|b| b.gain > 1e-12 * total_sq.max(1e-300))
    }

    fn significant(&self, c: &Candidate) -> bool {
        let Some(alpha) = self.params.alpha else {
            return true;
        };
        if c.t_stat.is_infinite() {
            return true;
        }
        if c.t_stat == 0.0 || !c.t_stat.is_finite() {
            return false;
        }
        let df = c.df.max(1.0);
        let p = match StudentsT::new(0.0, 1.0, df) {
            Ok(t) => 2.0 * t.sf(c.t_stat),
            Err(_) => return false,
        };
        let mut m = c.cuts_tried as f64;
        if self.params.bonferroni {
            m *= self.x.ncols() as f64;
        }
        p * m < alpha
    }
}

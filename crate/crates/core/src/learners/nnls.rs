//! Lawson–Hanson non-negative least squares.

use nalgebra::{DMatrix, DVector};

/// `argmin_{w ≥ 0} |Z w − y|²`.
pub fn nnls(z: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let p = z.ncols();
    let ztz = z.transpose() * z;
    let zty = z.transpose() * y;
    let mut w = DVector::<f64>::zeros(p);
    let mut passive = vec![false; p];
    let tol = 1e-12 * ztz.diagonal().amax().max(1.0);

    for _outer in 0..(3 * p + 10) {
        let grad = &zty - &ztz * &w;
        let cand = (0..p)
            .filter(|&j| !passive[j])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        match cand {
            Some(j) if grad[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..p).filter(|&j| passive[j]).collect();
            let s_sub = solve_sub(&ztz, &zty, &idx);
            let mut s = DVector::<f64>::zeros(p);
            for (k, &j) in idx.iter().enumerate() {
                s[j] = s_sub[k];
            }
            if idx.iter().all(|&j| s[j] > 0.0) {
                w = s;
                break;
            }
            let mut step = 1.0f64;
            for &j in &idx {
                if s[j] <= 0.0 {
                    let denom = w[j] - s[j];
                    if denom > 0.0 {
                        step = step.min(w[j] / denom);
                    }
                }
            }
            w = &w + (&s - &w) * step;
            for &j in &idx {
                if w[j] <= 1e-15 {
                    w[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&b| b) {
                break;
            }
        }
    }
    w
}

fn solve_sub(ztz: &DMatrix<f64>, zty: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let k = idx.len();
    let mut a = DMatrix::<f64>::from_fn(k, k, |r, c| ztz[(idx[r], idx[c])]);
    let b = DVector::<f64>::from_fn(k, |r, _| zty[idx[r]]);
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(&b);
    }
    let jitter = 1e-10 * a.diagonal().amax().max(1e-300);
    for d in 0..k {
        a[(d, d)] += jitter;
    }
    a.cholesky().map(|ch| ch.solve(&b)).unwrap_or_else(|| DVector::zeros(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_nonnegative_solution() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
        let w_true = DVector::from_vec(vec![0.7, 0.3]);
        let y = &z * &w_true;
        let w = nnls(&z, &y);
        assert!((w - w_true).amax() < 1e-9);
    }

    #[test]
    fn clips_negative_direction() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        let y = DVector::from_vec(vec![-1.0, -2.0, -3.0]);
        let w = nnls(&z, &y);
        assert!(w.iter().all(|v| *v >= 0.0));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scaled outcomes are clamped to `[CLAMP_TOL, 1 - CLAMP_TOL]`.
pub const CLAMP_TOL: f64 = 1e-4;

/// Affine map from outcome units onto the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScale {
    pub y_min: f64,
    pub y_max: f64,
}

/// Scaled values plus how many fell outside the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub values: Vec<f64>,
    pub out_of_range: usize,
}

impl OutcomeScale {
    pub fn fit(y: &[f64]) -> Result<Self> {
        let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(y_min, y_max)
    }

    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_max > y_min) || !y_min.is_finite() || !y_max.is_finite() {
            return Err(Error::DegenerateOutcome(y_min));
        }
        Ok(OutcomeScale { y_min, y_max })
    }

    pub fn range(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn scale_one(&self, y: f64) -> f64 {
        ((y - self.y_min) / self.range()).clamp(CLAMP_TOL, 1.0 - CLAMP_TOL)
    }

    pub fn scale(&self, y: &[f64]) -> Scaled {
        let out_of_range = y.iter().filter(|&&v| v < self.y_min || v > self.y_max).count();
        if out_of_range > 0 {
            log::warn!("{out_of_range} outcome values outside the training range were clamped");
        }
        Scaled {
            values: y.iter().map(|&v| self.scale_one(v)).collect(),
            out_of_range,
        }
    }

    pub fn unscale_one(&self, s: f64) -> f64 {
        self.y_min + s * self.range()
    }

    pub fn unscale(&self, s: &[f64]) -> Vec<f64> {
        s.iter().map(|&v| self.unscale_one(v)).collect()
    }
}

/// Clamp a scaled prediction to the open unit interval used by the logit link.
pub fn clamp_unit(q: f64) -> f64 {
    q.clamp(CLAMP_TOL, 1.0 - CLAMP_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_clamped() {
        let s = OutcomeScale::new(0.0, 10.0).unwrap();
        let got = s.scale(&[0.0, 5.0, 10.0]);
        assert_eq!(got.values, vec![1e-4, 0.5, 1.0 - 1e-4]);
        assert_eq!(got.out_of_range, 0);
    }

    #[test]
    fn degenerate_outcome() {
        assert!(matches!(OutcomeScale::fit(&[3.0, 3.0]), Err(Error::DegenerateOutcome(_))));
    }

    #[test]
    fn validation_outlier_clamped_and_counted() {
        let train = [1.0, 2.0, 3.0, 4.0];
        let s = OutcomeScale::fit(&train).unwrap();
        let test = s.scale(&[2.5, 9.0, -3.0]);
        assert_eq!(test.out_of_range, 2);
        assert_eq!(test.values[1], 1.0 - CLAMP_TOL);
        assert_eq!(test.values[2], CLAMP_TOL);
        assert!((test.values[0] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_inside_clamp(lo in -100.0f64..100.0, width in 0.1f64..100.0, t in 0.001f64..0.999) {
            let s = OutcomeScale::new(lo, lo + width).unwrap();
            let y = lo + t * width;
            prop_assert!((s.unscale_one(s.scale_one(y)) - y).abs() < 1e-9 * width.max(1.0));
        }

        #[test]
        fn strictly_monotone(lo in -10.0f64..10.0, t1 in 0.001f64..0.998, dt in 1e-6f64..0.001) {
            let s = OutcomeScale::new(lo, lo + 3.0).unwrap();
            let t2 = (t1 + dt).min(0.9989);
            prop_assume!(t2 > t1);
            prop_assert!(s.scale_one(lo + 3.0 * t2) > s.scale_one(lo + 3.0 * t1));
        }
    }
}

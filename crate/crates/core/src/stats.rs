//! Monte Carlo accumulation helpers.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatExt;

/// Mean and standard error of a Monte Carlo sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub replicas: usize,
}

impl Estimate {
    /// Reduces per-replica values in index order (deterministic under any
    /// parallel map that preserves indices).
    pub fn from_values(values: &[f64]) -> Estimate {
        let m = values.len();
        assert!(m >= 2, "an estimate needs at least two replicas");
        let mean = values.iter().sum::<f64>() / m as f64;
        let ss = values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>();
        let stderr = (ss / (m as f64 - 1.0)).sqrt() / (m as f64).sqrt();
        Estimate {
            mean,
            stderr,
            replicas: m,
        }
    }

    /// |mean| measured in standard errors.
    pub fn z_score(&self) -> f64 {
        if self.stderr == 0.0 {
            if self.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.mean.abs() / self.stderr
        }
    }
}

/// Sample mean of a slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    debug_assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fits `value ~ C * exp(-rate * t)` by least squares on `ln value`,
/// restricted to the largest initial window where `value > floor`.
/// Returns `None` if fewer than two usable points remain.
pub fn fit_exponential_rate(times: &[f64], values: &[f64], floor: f64) -> Option<f64> {
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    for (&t, &v) in times.iter().zip(values.iter()) {
        if v > floor {
            ts.push(t);
            ls.push(v.ln());
        } else {
            break;
        }
    }
    if ts.len() < 2 {
        return None;
    }
    let (slope, _) = linear_fit(&ts, &ls);
    Some(-slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn estimate_basics() {
        let e = Estimate::from_values(&[1.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.replicas, 2);
        // sample std = sqrt(2), stderr = sqrt(2)/sqrt(2) = 1
        assert!((e.stderr - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exponential_rate_recovery() {
        let times: Vec<f64> = (0..20).map(|k| 0.1 * k as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 3.0 * (-1.7 * t).exp()).collect();
        let rate = fit_exponential_rate(&times, &values, 1e-12).unwrap();
        assert!((rate - 1.7).abs() < 1e-9);
    }

    #[test]
    fn rate_fit_respects_floor() {
        let times = vec![0.0, 1.0, 2.0, 3.0];
        let values = vec![1.0, 0.1, 1e-15, 1e-16];
        let rate = fit_exponential_rate(&times, &values, 1e-10).unwrap();
        assert!((rate - (0.1f64.ln() / -1.0)).abs() < 1e-12);
    }
}

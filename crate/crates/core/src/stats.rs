//! Order-fixed reductions and the small amount of sampling statistics the
//! verification harness needs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation with a fixed split rule, so the result only
/// depends on the order of `xs` and never on how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let m = mean(xs);
        let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
        let var = if n > 1 {
            pairwise_sum(&dev) / (n - 1) as f64
        } else {
            f64::NAN
        };
        Self {
            mean: m,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Mean of `f(x)` over the samples.
    pub fn of<F: Fn(f64) -> f64>(xs: &[f64], f: F) -> Self {
        let mapped: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        Self::from_samples(&mapped)
    }

    pub fn relative_error(&self) -> f64 {
        if self.mean == 0.0 {
            if self.std_error == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.std_error / self.mean).abs()
        }
    }
}

/// Unbiased sample variance with the delta-method standard error
/// `sqrt((m4 - s^4) / n)`.
pub fn variance_estimate(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    let quart: Vec<f64> = sq.iter().map(|s| s * s).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    let m4 = pairwise_sum(&quart) / n as f64;
    MeanEstimate {
        mean: var,
        std_error: ((m4 - var * var).max(0.0) / n as f64).sqrt(),
        n,
    }
}

/// Sample covariance `E[(x - x̄)(y - ȳ)]` with the standard error of the
/// product mean.
pub fn covariance_estimate(xs: &[f64], ys: &[f64]) -> MeanEstimate {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let prods: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .collect();
    MeanEstimate::from_samples(&prods)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_x - F_y|`.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> f64 {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic KS critical value `c(alpha) * sqrt((n + m) / (n m))` with
/// `c(alpha) = sqrt(-ln(alpha / 2) / 2)`.
pub fn ks_two_sample_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// One-sample KS statistic of standardized data against N(0, 1).
pub fn ks_standard_normal(xs: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut a = xs.to_vec();
    a.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    a.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = normal.cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}

/// Asymptotic one-sample KS critical value.
pub fn ks_one_sample_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ks_identical_samples_is_zero() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&xs, &xs), 0.0);
    }

    #[test]
    fn ks_disjoint_samples_is_one() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = (20..30).map(|i| i as f64).collect();
        assert_eq!(ks_two_sample(&xs, &ys), 1.0);
    }

    #[test]
    fn ks_critical_value_one_percent() {
        // c(0.01) ≈ 1.6276
        let c = ks_two_sample_critical(10_000, 10_000, 0.01);
        assert!((c - 1.6276 * (2.0f64 / 10_000.0).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let v = variance_estimate(&[3.0; 50]);
        assert_eq!(v.mean, 0.0);
        assert_eq!(v.std_error, 0.0);
    }

    proptest! {
        #[test]
        fn pairwise_matches_naive_sum(xs in prop::collection::vec(-1e3f64..1e3, 0..500)) {
            let naive: f64 = xs.iter().sum();
            let pw = pairwise_sum(&xs);
            prop_assert!((naive - pw).abs() <= 1e-9 * (1.0 + xs.iter().map(|x| x.abs()).sum::<f64>()));
        }

        #[test]
        fn standard_error_is_nonnegative(xs in prop::collection::vec(-10f64..10.0, 2..200)) {
            let est = MeanEstimate::from_samples(&xs);
            prop_assert!(est.std_error >= 0.0);
            prop_assert!(est.mean >= -10.0 && est.mean <= 10.0);
        }
    }
}

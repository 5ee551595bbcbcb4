//! Estimators with error bars and the pass/fail rules of the verification
//! suites.
//!
//! A moment comparison passes when `|estimate - target| <= 3 SE + bias`, where
//! `bias` is a deterministic allowance for discretization (band width, grid
//! step) stated alongside each comparison. Distributional comparisons use a
//! two-sided Kolmogorov-Smirnov test at level 0.01, reported in the same
//! shape: the statistic `D` is the estimate, 0 the target, and the critical
//! value `D_crit` (the `D` whose p-value is 0.01) the tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const SIGMA_MULTIPLIER: f64 = 3.0;
pub const KS_ALPHA: f64 = 0.01;
pub const KS_MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub estimate: f64,
    pub std_error: f64,
    pub target: f64,
    /// `3 * std_error` for moment tests, `D_crit` for KS tests.
    pub stat_tolerance: f64,
    pub bias_tolerance: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub n_effective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl TestResult {
    /// Moment comparison with the `3 SE + bias` rule.
    pub fn moment(estimate: f64, std_error: f64, target: f64, bias: f64, n_effective: f64) -> Self {
        let stat = SIGMA_MULTIPLIER * std_error;
        let tolerance = stat + bias;
        Self {
            estimate,
            std_error,
            target,
            stat_tolerance: stat,
            bias_tolerance: bias,
            tolerance,
            pass: (estimate - target).abs() <= tolerance,
            n_effective,
            p_value: None,
        }
    }

    /// Replaces the bias allowance, re-deciding the outcome.
    pub fn with_bias(self, bias: f64) -> Self {
        Self::moment(self.estimate, self.std_error, self.target, bias, self.n_effective)
    }

    pub fn deviation(&self) -> f64 {
        (self.estimate - self.target).abs()
    }

    /// Marks the result failed regardless of the numbers (e.g. degenerate
    /// importance weights make the error bar meaningless).
    pub fn fail(mut self) -> Self {
        self.pass = false;
        self
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `|mean - target| <= 3 SE + bias`.
pub fn mean_compare(samples: &[f64], target: f64, bias: f64) -> Result<TestResult> {
    if samples.is_empty() {
        return Err(Error::Config("no samples".into()));
    }
    let (m, se) = mean_se(samples);
    Ok(TestResult::moment(m, se, target, bias, samples.len() as f64))
}

/// Empirical `E[exp(-lambda Z)]` against `target`.
pub fn laplace_compare(samples: &[f64], lambda: f64, target: f64) -> Result<TestResult> {
    if !(lambda >= 0.0) {
        return Err(domain("lambda", lambda));
    }
    let w: Vec<f64> = samples.iter().map(|&z| (-lambda * z).exp()).collect();
    mean_compare(&w, target, 0.0)
}

/// Kolmogorov survival function `Q(l) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 l^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value of a KS distance `d` at effective sample size `ne`,
/// with Stephens' small-sample correction.
pub fn ks_p_value(d: f64, ne: f64) -> f64 {
    let s = ne.sqrt();
    kolmogorov_q((s + 0.12 + 0.11 / s) * d)
}

/// The distance whose p-value is exactly `alpha`.
pub fn ks_critical(ne: f64, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ks_p_value(mid, ne) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn ks_result(d: f64, ne: f64, n: usize) -> TestResult {
    let p = ks_p_value(d, ne);
    let crit = ks_critical(ne, KS_ALPHA);
    TestResult {
        estimate: d,
        std_error: f64::NAN,
        target: 0.0,
        stat_tolerance: crit,
        bias_tolerance: 0.0,
        tolerance: crit,
        pass: p > KS_ALPHA,
        n_effective: n as f64,
        p_value: Some(p),
    }
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.len() < KS_MIN_SAMPLES {
        return Err(Error::Config(format!(
            "KS test needs at least {KS_MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::Config("NaN sample".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(xs)
}

/// One-sample two-sided KS test against a continuous `cdf`.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<TestResult> {
    let xs = sorted(samples)?;
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max);
    Ok(ks_result(d, n, xs.len()))
}

/// Two-sample two-sided KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let xs = sorted(a)?;
    let ys = sorted(b)?;
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    Ok(ks_result(d, ne, xs.len().min(ys.len())))
}

/// Effective sample size `(sum w)^2 / sum w^2` of importance weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflected::stationary_cdf;
    use crate::rng::path_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn laplace_trivial_cases() {
        let r = laplace_compare(&[0.3, 1.0, 7.0], 0.0, 1.0).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert!(r.pass);
        let r = laplace_compare(&[0.0; 10], 2.5, 1.0).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert!(r.pass);
        assert!(laplace_compare(&[1.0], -1.0, 1.0).is_err());
    }

    #[test]
    fn pass_flag_tracks_tolerance() {
        let r = TestResult::moment(1.1, 0.01, 1.0, 0.05, 100.0);
        assert!(!r.pass);
        assert_abs_diff_eq!(r.tolerance, 0.08, epsilon = 1e-15);
        assert!(r.clone().with_bias(0.08).pass);
        assert!(!r.with_bias(0.08).fail().pass);
    }

    #[test]
    fn kolmogorov_reference_points() {
        // Q(1.3581) = 0.05 and Q(1.6276) = 0.01 are the textbook quantiles
        assert_abs_diff_eq!(kolmogorov_q(1.3581), 0.05, epsilon = 1e-4);
        assert_abs_diff_eq!(kolmogorov_q(1.6276), 0.01, epsilon = 1e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!(kolmogorov_q(5.0) < 1e-20);
    }

    #[test]
    fn critical_distance_inverts_p_value() {
        for ne in [100.0, 1e4, 5e3] {
            let d = ks_critical(ne, 0.01);
            assert_abs_diff_eq!(ks_p_value(d, ne), 0.01, epsilon = 1e-9);
        }
    }

    #[test]
    fn ks_null_calibration() {
        // about 1% of null tests should fail
        let trials = 400;
        let mut rejections = 0;
        for t in 0..trials {
            let mut rng = path_rng(1, "ks-null", t);
            let xs: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
            if !ks_test(&xs, |x| x.clamp(0.0, 1.0)).unwrap().pass {
                rejections += 1;
            }
        }
        assert!(rejections <= 12, "{rejections} rejections in {trials}");
    }

    #[test]
    fn ks_uniform_against_stationary_laws() {
        let mut rng = path_rng(2, "ks", 0);
        let xs: Vec<f64> = (0..2_000).map(|_| 2.0 * rng.random::<f64>()).collect();
        assert!(ks_test(&xs, |x| stationary_cdf(0.0, 2.0, x)).unwrap().pass);
        assert!(!ks_test(&xs, |x| stationary_cdf(0.5, 2.0, x)).unwrap().pass);
        let ys: Vec<f64> = (0..1_000).map(|_| rng.random::<f64>()).collect();
        assert!(!ks_test(&ys, |x| stationary_cdf(0.5, 1.0, x)).unwrap().pass);
        assert!(ks_test(&xs[..50], |x| x).is_err());
    }

    #[test]
    fn two_sample_ks() {
        let mut rng = path_rng(3, "ks2", 0);
        let a: Vec<f64> = (0..3_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..2_000).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..2_000).map(|_| rng.random::<f64>().powf(1.3)).collect();
        assert!(ks_two_sample(&a, &b).unwrap().pass);
        assert!(!ks_two_sample(&a, &c).unwrap().pass);
        // identical samples have distance 0
        assert_eq!(ks_two_sample(&a, &a).unwrap().estimate, 0.0);
    }

    #[test]
    fn ess_of_equal_and_degenerate_weights() {
        assert_abs_diff_eq!(effective_sample_size(&[2.0; 50]), 50.0, epsilon = 1e-12);
        let mut w = vec![1e-12; 99];
        w.push(1.0);
        assert!(effective_sample_size(&w) < 1.01);
    }
}

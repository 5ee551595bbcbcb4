//! Quadratic branching mechanism `psi(u) = 2u^2 + 4 theta u` and its
//! continuous-state branching process.
//!
//! Everything here is closed form or exact: the Laplace exponent
//! `u(lambda, t)` solving `u' = -psi(u)`, `u(0) = lambda`, a plain RK4
//! integrator used to cross-check it, and an exact transition sampler that
//! the statistical suites use as ground truth.
//!
//! The transition sampler rests on the fractional-linear form
//! `u(lambda, s) = q lambda / (1 + c lambda)` with `q = exp(-4 theta s)` and
//! `c = (1 - q) / (2 theta)` (`c = 2s` at `theta = 0`). A compound
//! Poisson-exponential variable with `N ~ Poisson(z q / c)` summands of mean
//! `c` has Laplace transform `exp(-z u(lambda, s))`, so it is the exact law of
//! `Z_{t+s}` given `Z_t = z`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Below this `|theta|` the critical formulas are used in place of the
/// `theta != 0` ones, whose `(1 - e^{-4 theta t}) / (2 theta)` factor is 0/0.
pub const THETA_SWITCH: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchingParams {
    theta: f64,
    gamma: f64,
}

impl BranchingParams {
    pub fn new(theta: f64, gamma: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(domain("theta", theta));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(domain("gamma", gamma));
        }
        Ok(Self { theta, gamma })
    }

    /// Parameters without pruning.
    pub fn with_theta(theta: f64) -> Result<Self> {
        Self::new(theta, 0.0)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Parameter of the pruned process, `theta + gamma`.
    pub fn pruned(&self) -> Self {
        Self {
            theta: self.theta + self.gamma,
            gamma: 0.0,
        }
    }

    fn is_critical(&self) -> bool {
        self.theta.abs() < THETA_SWITCH
    }

    pub fn psi(&self, u: f64) -> Result<f64> {
        if !(u >= 0.0) {
            return Err(domain("u", u));
        }
        Ok(2.0 * u * u + 4.0 * self.theta * u)
    }

    /// `(q, c)` of the fractional-linear representation at time `t`.
    fn fractional_linear(&self, t: f64) -> (f64, f64) {
        if self.is_critical() {
            (1.0, 2.0 * t)
        } else {
            let k = -4.0 * self.theta * t;
            // (1 - e^{k}) / (2 theta), written with expm1 to keep small k accurate
            (k.exp(), -k.exp_m1() / (2.0 * self.theta))
        }
    }

    /// Closed-form Laplace exponent `u(lambda, t)`.
    pub fn u_closed(&self, lambda: f64, t: f64) -> Result<f64> {
        if !(lambda >= 0.0) {
            return Err(domain("lambda", lambda));
        }
        if !(t >= 0.0) {
            return Err(domain("t", t));
        }
        if lambda.is_infinite() {
            return Ok(self.u_infinity(t));
        }
        let (q, c) = self.fractional_linear(t);
        Ok(lambda * q / (1.0 + c * lambda))
    }

    /// `lim_{lambda -> inf} u(lambda, t) = q / c`; `exp(-x q / c)` is the
    /// probability of extinction by time `t`.
    pub fn u_infinity(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return f64::INFINITY;
        }
        let (q, c) = self.fractional_linear(t);
        q / c
    }

    /// Classical RK4 integration of `u' = -psi(u)` from `u(0) = lambda`.
    /// The last step is shortened to land on `t`.
    pub fn u_ode(&self, lambda: f64, t: f64, dt_ode: f64) -> Result<f64> {
        if !(lambda >= 0.0) {
            return Err(domain("lambda", lambda));
        }
        if !(t >= 0.0) {
            return Err(domain("t", t));
        }
        if !(dt_ode > 0.0) {
            return Err(domain("dt_ode", dt_ode));
        }
        // psi extended to negative arguments so an overshooting stage is
        // detected below instead of tripping the domain check.
        let rhs = |u: f64| -(2.0 * u * u + 4.0 * self.theta * u);
        let mut u = lambda;
        let mut s = 0.0;
        while s < t {
            let h = dt_ode.min(t - s);
            let k1 = rhs(u);
            let k2 = rhs(u + 0.5 * h * k1);
            let k3 = rhs(u + 0.5 * h * k2);
            let k4 = rhs(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            s += h;
            if u < 0.0 || !u.is_finite() {
                return Err(Error::StepTooLarge { dt: dt_ode, t: s });
            }
            if t - s < 1e-12 * t.max(1.0) {
                break;
            }
        }
        Ok(u)
    }

    /// `E[Z_t | Z_0 = z] = z e^{-4 theta t}`.
    pub fn mean(&self, z: f64, t: f64) -> f64 {
        z * (-4.0 * self.theta * t).exp()
    }

    /// Probability that the process started at `x` eventually dies out:
    /// 1 when `theta >= 0`, `e^{2 x theta}` otherwise.
    pub fn extinction_probability(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(domain("x", x));
        }
        Ok(if self.theta >= 0.0 {
            1.0
        } else {
            (2.0 * x * self.theta).exp()
        })
    }
}

/// Free-function form of [`BranchingParams::psi`].
pub fn psi(params: &BranchingParams, u: f64) -> Result<f64> {
    params.psi(u)
}

pub fn u_closed(params: &BranchingParams, lambda: f64, t: f64) -> Result<f64> {
    params.u_closed(lambda, t)
}

pub fn u_ode(params: &BranchingParams, lambda: f64, t: f64, dt_ode: f64) -> Result<f64> {
    params.u_ode(lambda, t, dt_ode)
}

pub fn extinction_probability(params: &BranchingParams, x: f64) -> Result<f64> {
    params.extinction_probability(x)
}

/// Exact draw of `Z_{t+s}` given `Z_t = z`.
pub fn csbp_transition_sample<R: Rng + ?Sized>(
    params: &BranchingParams,
    z: f64,
    s: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(z >= 0.0) || !z.is_finite() {
        return Err(domain("z", z));
    }
    if !(s > 0.0) {
        return Err(domain("s", s));
    }
    Ok(transition_unchecked(params, z, s, rng))
}

fn transition_unchecked<R: Rng + ?Sized>(params: &BranchingParams, z: f64, s: f64, rng: &mut R) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let (q, c) = params.fractional_linear(s);
    let rate = z * q / c;
    if !(rate > 0.0) {
        return 0.0;
    }
    let n: f64 = Poisson::new(rate)
        .expect("positive finite Poisson rate")
        .sample(rng);
    if n == 0.0 {
        return 0.0;
    }
    Gamma::new(n, c).expect("positive gamma shape").sample(rng)
}

/// Grid samples of the branching process, absorbed at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsbpPath {
    pub t0: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl CsbpPath {
    pub fn last(&self) -> f64 {
        *self.values.last().expect("path has its initial value")
    }

    pub fn is_extinct(&self) -> bool {
        self.last() == 0.0
    }

    /// First grid time at which the path sits at 0.
    pub fn extinction_time(&self) -> Option<f64> {
        self.values
            .iter()
            .position(|&z| z == 0.0)
            .map(|i| self.t0 + i as f64 * self.step)
    }
}

/// Chains exact transitions on the grid `0, step, 2 step, ...` up to `horizon`.
pub fn csbp_path<R: Rng + ?Sized>(
    params: &BranchingParams,
    z0: f64,
    horizon: f64,
    step: f64,
    rng: &mut R,
) -> Result<CsbpPath> {
    if !(z0 >= 0.0) || !z0.is_finite() {
        return Err(domain("z0", z0));
    }
    if !(horizon > 0.0) {
        return Err(domain("horizon", horizon));
    }
    if !(step > 0.0) {
        return Err(domain("step", step));
    }
    let n = (horizon / step - 1e-9).ceil() as usize;
    let mut values = Vec::with_capacity(n + 1);
    values.push(z0);
    let mut z = z0;
    for _ in 0..n {
        z = transition_unchecked(params, z, step, rng);
        values.push(z);
    }
    Ok(CsbpPath {
        t0: 0.0,
        step,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use crate::rng::SimRng;

    fn p(theta: f64) -> BranchingParams {
        BranchingParams::with_theta(theta).unwrap()
    }

    #[test]
    fn psi_values() {
        assert_eq!(p(0.0).psi(1.0).unwrap(), 2.0);
        assert_eq!(p(3.7).psi(0.0).unwrap(), 0.0);
        assert_eq!(p(-1.0).psi(1.0).unwrap(), -2.0);
        assert!(p(0.0).psi(-0.1).is_err());
    }

    #[test]
    fn params_reject_bad_input() {
        assert!(BranchingParams::new(f64::NAN, 0.0).is_err());
        assert!(BranchingParams::new(0.0, -1.0).is_err());
        assert!(BranchingParams::new(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn u_closed_initial_condition_and_critical_case() {
        for theta in [-1.0, 0.0, 0.5] {
            assert_eq!(p(theta).u_closed(2.5, 0.0).unwrap(), 2.5);
        }
        assert_abs_diff_eq!(p(0.0).u_closed(1.0, 0.5).unwrap(), 0.5, epsilon = 1e-15);
        // just inside the switch the two branches agree far below test tolerances
        let near = p(0.9 * THETA_SWITCH).u_closed(1.0, 0.5).unwrap();
        let away = p(1.1 * THETA_SWITCH).u_closed(1.0, 0.5).unwrap();
        assert_abs_diff_eq!(near, away, epsilon = 1e-7);
    }

    #[test]
    fn u_ode_matches_closed_form_on_grid() {
        for theta in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            for lambda in [0.1, 1.0, 10.0] {
                for t in [0.1, 1.0, 2.0] {
                    let ode = p(theta).u_ode(lambda, t, 1e-4).unwrap();
                    let closed = p(theta).u_closed(lambda, t).unwrap();
                    assert!(
                        (ode - closed).abs() < 1e-6,
                        "theta={theta} lambda={lambda} t={t}: {ode} vs {closed}"
                    );
                }
            }
        }
        assert_abs_diff_eq!(p(0.0).u_ode(1.0, 0.5, 1e-4).unwrap(), 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(
            p(-0.5).u_ode(2.0, 1.0, 1e-4).unwrap(),
            p(-0.5).u_closed(2.0, 1.0).unwrap(),
            epsilon = 1e-6
        );
        assert_eq!(p(0.3).u_ode(0.0, 4.0, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn u_ode_flags_oversized_steps() {
        let err = p(0.0).u_ode(100.0, 1.0, 0.5).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
    }

    #[test]
    fn u_infinity_limits() {
        for theta in [-0.5, 0.7] {
            let lim = p(theta).u_infinity(1.3);
            let expect = 2.0 * theta / ((4.0 * theta * 1.3f64).exp() - 1.0);
            assert_abs_diff_eq!(lim, expect, epsilon = 1e-12);
            assert_abs_diff_eq!(p(theta).u_closed(1e12, 1.3).unwrap(), lim, epsilon = 1e-9);
        }
        // long-time limit for theta < 0 recovers the extinction probability
        let theta = -0.5;
        let x = 1.0;
        let lim = p(theta).u_infinity(60.0);
        assert_abs_diff_eq!(lim, -2.0 * theta, epsilon = 1e-12);
        assert_abs_diff_eq!(
            (-x * lim).exp(),
            p(theta).extinction_probability(x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn extinction_probability_rule() {
        assert_eq!(p(0.3).extinction_probability(5.0).unwrap(), 1.0);
        assert_abs_diff_eq!(
            p(-0.5).extinction_probability(1.0).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(p(-2.0).extinction_probability(1e-12).unwrap(), 1.0, epsilon = 1e-10);
        assert!(p(0.0).extinction_probability(0.0).is_err());
    }

    #[test]
    fn sampler_absorbs_at_zero() {
        let mut rng = SimRng::seed_from_u64(1);
        assert_eq!(csbp_transition_sample(&p(-1.0), 0.0, 0.3, &mut rng).unwrap(), 0.0);
        let path = csbp_path(&p(-1.0), 0.0, 2.0, 0.1, &mut rng).unwrap();
        assert!(path.values.iter().all(|&z| z == 0.0));
        assert_eq!(path.values.len(), 21);
    }

    #[test]
    fn sampler_mean_is_exponential_in_time() {
        let mut rng = SimRng::seed_from_u64(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| csbp_transition_sample(&p(0.0), 1.0, 0.5, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn sampler_laplace_transform_matches_closed_form() {
        // grid of the oracle-integrity check, one seed per cell
        let mut seed = 100;
        for theta in [-0.5, 0.0, 0.5] {
            for lambda in [0.5, 1.0, 2.0] {
                for s in [0.5, 1.0] {
                    seed += 1;
                    let mut rng = SimRng::seed_from_u64(seed);
                    let n = 100_000;
                    let w: Vec<f64> = (0..n)
                        .map(|_| (-lambda * csbp_transition_sample(&p(theta), 1.0, s, &mut rng).unwrap()).exp())
                        .collect();
                    let mean = w.iter().sum::<f64>() / n as f64;
                    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    let se = (var / n as f64).sqrt();
                    let target = (-p(theta).u_closed(lambda, s).unwrap()).exp();
                    assert!(
                        (mean - target).abs() <= 3.0 * se + 1e-12,
                        "theta={theta} lambda={lambda} s={s}: {mean} vs {target} (se {se})"
                    );
                }
            }
        }
    }

    #[test]
    fn subcritical_chains_die_out() {
        let mut rng = SimRng::seed_from_u64(5);
        let n = 10_000;
        let dead = (0..n)
            .filter(|_| csbp_path(&p(0.5), 1.0, 20.0, 0.5, &mut rng).unwrap().is_extinct())
            .count();
        assert!(dead as f64 / n as f64 > 0.999);
    }

    proptest! {
        #[test]
        fn semigroup(theta in -1.5f64..1.5, lambda in 0.0f64..20.0, s in 0.0f64..2.0, t in 0.0f64..2.0) {
            let q = p(theta);
            let lhs = q.u_closed(q.u_closed(lambda, s).unwrap(), t).unwrap();
            let rhs = q.u_closed(lambda, s + t).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn monotone_in_lambda(theta in -1.5f64..1.5, l1 in 0.0f64..20.0, dl in 0.0f64..5.0, t in 0.0f64..3.0) {
            let q = p(theta);
            prop_assert!(q.u_closed(l1, t).unwrap() <= q.u_closed(l1 + dl, t).unwrap() + 1e-15);
        }

        #[test]
        fn paths_stay_absorbed(theta in -1.0f64..1.0, seed in 0u64..1000) {
            let mut rng = SimRng::seed_from_u64(seed);
            let path = csbp_path(&p(theta), 0.3, 5.0, 0.25, &mut rng).unwrap();
            prop_assert!(path.values.iter().all(|&z| z >= 0.0));
            if let Some(i) = path.values.iter().position(|&z| z == 0.0) {
                prop_assert!(path.values[i..].iter().all(|&z| z == 0.0));
            }
        }
    }
}

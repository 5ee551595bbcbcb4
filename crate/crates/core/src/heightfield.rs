//! The local-time field `r -> Z_r = L_r(T_x)` of a path stopped when its
//! local time at 0 reaches `x`, and the identities it is checked against.
//!
//! For a path with drift `-2 theta`, `Z` is a branching process in the level
//! variable with mechanism `psi(u) = 2u^2 + 4 theta u` started at `x`, so
//! `E[exp(-lambda Z_r)] = exp(-x u(lambda, r))`. The field does not depend on
//! the ceiling as long as it lies above `r`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csbp::BranchingParams;
use crate::error::{domain, Error, Result};
use crate::pathops::stop_at_local_time;
use crate::reflected::{band_count, boundary_local_time, Boundary, GridPath, ReflectedBmConfig, Stepper};
use crate::rng::{derive_key, stream};
use crate::stats::{effective_sample_size, mean_se, TestResult};

/// Importance weights whose effective sample size falls below this fraction
/// of the path count are declared degenerate.
pub const DEGENERATE_ESS_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeField {
    /// Local time at 0 actually reached by the stopped path.
    pub x: f64,
    pub levels: Vec<f64>,
    pub z: Vec<f64>,
    /// Band width used at interior levels.
    pub epsilon: f64,
}

impl LocalTimeField {
    pub fn at(&self, level: f64) -> Option<f64> {
        self.levels
            .iter()
            .position(|&l| (l - level).abs() < 1e-12)
            .map(|i| self.z[i])
    }

    /// Trapezoidal `int Z_r dr` over the level grid.
    pub fn quadrature(&self) -> f64 {
        self.levels
            .windows(2)
            .zip(self.z.windows(2))
            .map(|(l, z)| 0.5 * (z[0] + z[1]) * (l[1] - l[0]))
            .sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "level,z")?;
        for (l, z) in self.levels.iter().zip(&self.z) {
            writeln!(w, "{l},{z}")?;
        }
        Ok(())
    }
}

/// Local-time field of a stopped path. Interior levels use the band
/// estimator over the whole path; level 0 and the ceiling use the exact
/// boundary regulators.
pub fn ray_knight_field(stopped: &GridPath, levels: &[f64], epsilon: f64) -> Result<LocalTimeField> {
    if !(epsilon > 0.0) {
        return Err(domain("epsilon", epsilon));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("levels must be strictly increasing".into()));
    }
    let a = stopped.ceiling();
    let end = stopped.horizon();
    let occupied = &stopped.values()[..stopped.steps()];
    let z = levels
        .iter()
        .map(|&r| {
            if !(0.0..=a).contains(&r) {
                Err(domain("level outside [0, a]", r))
            } else if r == 0.0 {
                boundary_local_time(stopped, Boundary::Lower, end)
            } else if r == a {
                boundary_local_time(stopped, Boundary::Upper, end)
            } else {
                let lo = (r - 0.5 * epsilon).max(0.0);
                let hi = (r + 0.5 * epsilon).min(a);
                Ok(band_count(occupied, lo, hi) as f64 * stopped.dt() / (hi - lo))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalTimeField {
        x: boundary_local_time(stopped, Boundary::Lower, end)?,
        levels: levels.to_vec(),
        z,
        epsilon,
    })
}

/// `int_0^{T} g(H_s) ds` as a left-point sum over the stopped path.
pub fn occupation_integral<G: Fn(f64) -> f64>(stopped: &GridPath, g: G) -> f64 {
    stopped.values()[..stopped.steps()].iter().map(|&v| g(v)).sum::<f64>() * stopped.dt()
}

/// Deterministic allowance for comparing an empirical field Laplace transform
/// with `exp(-x u)`:
///
/// * band smoothing: averaging `Z` over a band of width `eps` adds variance
///   `~ Z eps / 3`, which shifts `E[exp(-lambda Z)]` by at most
///   `(lambda^2 / 2) sup_z z e^{-lambda z} eps / 3 = lambda eps / (6e)`;
/// * stopping overshoot: the path stops one step after its local time at 0
///   passes `x`, so the initial mass is off by at most the mean overshoot
///   `delta`, moving the target by `u e^{-x u} delta`.
pub fn laplace_bias(lambda: f64, u: f64, x: f64, band: Option<f64>, mean_overshoot: f64) -> f64 {
    let smoothing = band.map_or(0.0, |eps| lambda * eps / (6.0 * std::f64::consts::E));
    smoothing + u * (-x * u).exp() * mean_overshoot.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovReport {
    pub theta: f64,
    pub lambda: f64,
    pub a: f64,
    pub x: f64,
    pub target: f64,
    /// Paths simulated with drift `-2 theta`.
    pub direct: TestResult,
    /// Driftless paths weighted by the likelihood ratio of the drift, the grid
    /// form of `exp(theta x - theta Z_a - 2 theta^2 T_x)`.
    pub reweighted: TestResult,
    /// Effective sample size of the raw weights.
    pub ess: f64,
    /// Effective sample size of the weighted integrand, which decides
    /// degeneracy.
    pub ess_integrand: f64,
    pub degenerate: bool,
}

impl GirsanovReport {
    pub fn pass(&self) -> bool {
        self.direct.pass && self.reweighted.pass
    }
}

/// `(Z_a, L_0, noise, T)` at the stopping time, without storing the path.
fn stopped_summary<R: Rng + ?Sized>(cfg: &ReflectedBmConfig, x: f64, rng: &mut R) -> Result<[f64; 4]> {
    let mut s = Stepper::new(cfg);
    while s.lower_local_time() <= x {
        if s.steps() >= cfg.max_steps {
            // the path itself is not kept; report just the origin
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                local_time: s.lower_local_time(),
                target: x,
                partial: Box::new(GridPath::with_capacity(cfg, 1)),
            });
        }
        s.step(rng);
    }
    Ok([s.upper_local_time(), s.lower_local_time(), s.noise(), s.steps() as f64 * cfg.dt])
}

fn stopped_summaries(cfg: &ReflectedBmConfig, x: f64, n_paths: usize, key: u64) -> Result<Vec<[f64; 4]>> {
    (0..n_paths)
        .into_par_iter()
        .map(|i| stopped_summary(cfg, x, &mut stream(key, i as u64)))
        .collect()
}

/// Estimates `E[exp(-lambda Z_a)]` under drift `theta` by direct simulation
/// and by reweighting driftless paths, and compares both with
/// `exp(-x u(lambda, a))`. `base` fixes the ceiling and grid; its `theta` is
/// ignored.
pub fn girsanov_check(
    base: &ReflectedBmConfig,
    theta: f64,
    lambda: f64,
    x: f64,
    n_paths: usize,
    seed: u64,
) -> Result<GirsanovReport> {
    if !(lambda >= 0.0) {
        return Err(domain("lambda", lambda));
    }
    if n_paths < 2 {
        return Err(Error::Config("need at least two paths".into()));
    }
    let a = base.a;
    let params = BranchingParams::with_theta(theta)?;
    let u = params.u_closed(lambda, a)?;
    let target = (-x * u).exp();

    let mean_overshoot = |rows: &[[f64; 4]]| rows.iter().map(|r| r[1] - x).sum::<f64>() / rows.len() as f64;

    let direct_rows = stopped_summaries(&base.with_theta(theta), x, n_paths, derive_key(seed, "girsanov-direct"))?;
    let vals: Vec<f64> = direct_rows.iter().map(|r| (-lambda * r[0]).exp()).collect();
    let (m, se) = mean_se(&vals);
    let bias = laplace_bias(lambda, u, x, None, mean_overshoot(&direct_rows));
    let direct = TestResult::moment(m, se, target, bias, n_paths as f64);

    // Likelihood ratio of the grid increments, exp(-2 theta beta - 2 theta^2 T);
    // by the Tanaka identity this is exp(theta L_0 - theta Z_a - 2 theta H_T - 2 theta^2 T).
    let null_rows = stopped_summaries(&base.with_theta(0.0), x, n_paths, derive_key(seed, "girsanov-null"))?;
    let weights: Vec<f64> = null_rows
        .iter()
        .map(|r| (-2.0 * theta * r[2] - 2.0 * theta * theta * r[3]).exp())
        .collect();
    let vals: Vec<f64> = null_rows.iter().zip(&weights).map(|(r, w)| w * (-lambda * r[0]).exp()).collect();
    let ess = effective_sample_size(&weights);
    // For theta < 0 the raw weights are heavy-tailed, but the integrand
    // w e^{-lambda Z_a} = exp(theta L_0 - 2 theta H_T - 2 theta^2 T - (theta + lambda) Z_a)
    // is bounded once lambda >= -theta, so degeneracy is judged on it.
    let ess_integrand = effective_sample_size(&vals);
    let degenerate = ess_integrand < DEGENERATE_ESS_FRACTION * n_paths as f64;
    let (m, se) = mean_se(&vals);
    let bias = laplace_bias(lambda, u, x, None, mean_overshoot(&null_rows));
    let mut reweighted = TestResult::moment(m, se, target, bias, ess_integrand);
    if degenerate {
        reweighted = reweighted.fail();
    }
    Ok(GirsanovReport {
        theta,
        lambda,
        a,
        x,
        target,
        direct,
        reweighted,
        ess,
        ess_integrand,
        degenerate,
    })
}

/// Field samples `Z_r` at `levels` for `n_paths` independent stopped paths.
pub fn field_samples(
    cfg: &ReflectedBmConfig,
    x: f64,
    levels: &[f64],
    epsilon: f64,
    n_paths: usize,
    key: u64,
) -> Result<Vec<LocalTimeField>> {
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let p = stop_at_local_time(cfg, x, &mut stream(key, i as u64))?;
            ray_knight_field(&p, levels, epsilon)
        })
        .collect()
}

/// Runs `f` on each of `n_paths` stopped paths without keeping them.
pub fn map_stopped<T, F>(cfg: &ReflectedBmConfig, x: f64, n_paths: usize, key: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&GridPath, &mut crate::rng::SimRng) -> Result<T> + Sync,
{
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(key, i as u64);
            let p = stop_at_local_time(cfg, x, &mut rng)?;
            f(&p, &mut rng)
        })
        .collect()
}

/// Draws one stopped path; convenience for callers holding their own rng.
pub fn stopped_field<R: Rng + ?Sized>(
    cfg: &ReflectedBmConfig,
    x: f64,
    levels: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<(GridPath, LocalTimeField)> {
    let p = stop_at_local_time(cfg, x, rng)?;
    let f = ray_knight_field(&p, levels, epsilon)?;
    Ok((p, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathops::project;
    use crate::rng::path_rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn level_above_the_path_is_empty() {
        let p = GridPath::from_values(0.01, 2.0, vec![0.0, 0.1, 0.3, 0.2, 0.0]).unwrap();
        let f = ray_knight_field(&p, &[0.0, 0.2, 1.5], 0.1).unwrap();
        assert_eq!(f.z[2], 0.0);
        assert!(f.z[1] > 0.0);
        assert!(ray_knight_field(&p, &[0.5, 0.2], 0.1).is_err());
        assert!(ray_knight_field(&p, &[0.5, 2.5], 0.1).is_err());
    }

    #[test]
    fn occupation_of_one_is_the_stopping_time() {
        let c = ReflectedBmConfig::new(0.2, 1.0, 1e-4).unwrap();
        let mut rng = path_rng(1, "t", 0);
        let p = stop_at_local_time(&c, 0.7, &mut rng).unwrap();
        assert_abs_diff_eq!(occupation_integral(&p, |_| 1.0), p.horizon(), epsilon = 1e-9);
    }

    #[test]
    fn field_anchor_and_quadrature() {
        let c = ReflectedBmConfig::new(0.0, 1.0, 1e-4).unwrap();
        let levels: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        for i in 0..10 {
            let mut rng = path_rng(2, "t", i);
            let (p, f) = stopped_field(&c, 1.0, &levels, 0.02, &mut rng).unwrap();
            // anchor: within one regulator step of x
            let last_jump = 2.0 * (p.reg0()[p.steps()] - p.reg0()[p.steps() - 1]);
            assert!(f.z[0] > 1.0 && f.z[0] - 1.0 <= last_jump + 1e-12);
            // int Z dr against the stopping time, O(eps + sqrt dt) apart
            let t = occupation_integral(&p, |_| 1.0);
            assert!((f.quadrature() - t).abs() < 0.05 * t.max(1.0) + 0.03, "{} vs {t}", f.quadrature());
        }
    }

    #[test]
    fn field_survives_projection_above_its_levels() {
        let c = ReflectedBmConfig::new(-0.5, 2.0, 1e-4).unwrap();
        let levels = [0.0, 0.25, 0.5, 0.75];
        for i in 0..5 {
            let mut rng = path_rng(3, "t", i);
            let p = stop_at_local_time(&c, 1.0, &mut rng).unwrap();
            let q = project(&p, 1.0).unwrap();
            let fp = ray_knight_field(&p, &levels, 0.02).unwrap();
            let fq = ray_knight_field(&q, &levels, 0.02).unwrap();
            for (a, b) in fp.z.iter().zip(&fq.z) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn bias_allowance_terms() {
        assert_eq!(laplace_bias(1.0, 0.5, 1.0, None, 0.0), 0.0);
        let b = laplace_bias(2.0, 0.5, 1.0, Some(0.04), 0.0);
        assert_abs_diff_eq!(b, 2.0 * 0.04 / (6.0 * std::f64::consts::E), epsilon = 1e-15);
        let b = laplace_bias(2.0, 0.5, 1.0, None, 0.01);
        assert_abs_diff_eq!(b, 0.5 * (-0.5f64).exp() * 0.01, epsilon = 1e-15);
    }

    #[test]
    fn girsanov_at_zero_theta_has_unit_weights() {
        let c = ReflectedBmConfig::new(0.0, 1.0, 1e-3).unwrap();
        let r = girsanov_check(&c, 0.0, 1.0, 1.0, 200, 5).unwrap();
        assert_abs_diff_eq!(r.ess, 200.0, epsilon = 1e-9);
        assert!(!r.degenerate);
    }
}

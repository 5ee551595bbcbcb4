//! Brownian motion with drift `-2 theta` reflected in `[0, a]`, on a uniform
//! time grid, with its boundary regulators and local-time estimators.
//!
//! The path solves `dY = dB - 2 theta dt + dR0 - dRa` where the regulators
//! `R0`, `Ra` are half the boundary local times: `L_0 = 2 R0`, `L_a = 2 Ra`.
//! With that normalization the local time at an interior level `r` is the
//! occupation density of the path at `r`, and at a boundary it is the
//! one-sided occupation density.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const DEFAULT_DT: f64 = 1e-4;
pub const DEFAULT_MAX_STEPS: usize = 20_000_000;

/// How a proposal that left `[0, a]` is brought back.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reflection {
    /// Fold the proposal back across the barrier. For a single barrier and no
    /// drift this is the exact transition of reflected Brownian motion, and the
    /// regulator increment (twice the overshoot) is a conditionally unbiased
    /// estimate of the regulator's true increment.
    #[default]
    Mirror,
    /// Project onto the barrier (the Euler-Skorokhod scheme). Its regulator is
    /// a discrete running supremum, which lags the continuous one by
    /// `~0.5826 sqrt(dt)` per boundary visit.
    Clip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectedBmConfig {
    pub theta: f64,
    /// Upper barrier.
    pub a: f64,
    pub dt: f64,
    pub max_steps: usize,
    #[serde(default)]
    pub reflection: Reflection,
}

impl ReflectedBmConfig {
    pub fn new(theta: f64, a: f64, dt: f64) -> Result<Self> {
        let cfg = Self {
            theta,
            a,
            dt,
            max_steps: DEFAULT_MAX_STEPS,
            reflection: Reflection::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_reflection(mut self, reflection: Reflection) -> Self {
        self.reflection = reflection;
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    /// Rejects barriers narrower than two step standard deviations
    /// (`dt > a^2 / 4`): the path would live mostly on the reflections.
    pub fn validate(&self) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(domain("theta", self.theta));
        }
        if !(self.a > 0.0) || !self.a.is_finite() {
            return Err(domain("a", self.a));
        }
        if !(self.dt > 0.0) {
            return Err(domain("dt", self.dt));
        }
        if self.dt > self.a * self.a / 4.0 {
            return Err(Error::Config(format!(
                "dt={} exceeds a^2/4={} for barrier a={}",
                self.dt,
                self.a * self.a / 4.0,
                self.a
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Default band width for occupation-density estimates.
    pub fn default_epsilon(&self) -> f64 {
        0.02 * self.a
    }
}

/// One grid step of the reflected walk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub value: f64,
    /// Raw Gaussian increment (no drift).
    pub noise: f64,
    pub d_reg0: f64,
    pub d_reg_a: f64,
}

/// Incremental simulator; [`simulate_reflected`] and friends are thin loops
/// over it. Useful on its own when only a functional of the path is needed.
#[derive(Debug, Clone)]
pub struct Stepper {
    drift: f64,
    sd: f64,
    a: f64,
    reflection: Reflection,
    value: f64,
    reg0: f64,
    reg_a: f64,
    noise: f64,
    steps: usize,
}

impl Stepper {
    pub fn new(cfg: &ReflectedBmConfig) -> Self {
        Self {
            drift: -2.0 * cfg.theta * cfg.dt,
            sd: cfg.dt.sqrt(),
            a: cfg.a,
            reflection: cfg.reflection,
            value: 0.0,
            reg0: 0.0,
            reg_a: 0.0,
            noise: 0.0,
            steps: 0,
        }
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Step {
        let z: f64 = rng.sample(StandardNormal);
        let xi = self.sd * z;
        let mut y = self.value + self.drift + xi;
        let mut d0 = 0.0;
        let mut da = 0.0;
        if !(0.0..=self.a).contains(&y) {
            match self.reflection {
                Reflection::Clip => {
                    if y < 0.0 {
                        d0 = -y;
                        y = 0.0;
                    } else {
                        da = y - self.a;
                        y = self.a;
                    }
                }
                Reflection::Mirror => loop {
                    if y < 0.0 {
                        d0 -= 2.0 * y;
                        y = -y;
                    } else if y > self.a {
                        da += 2.0 * (y - self.a);
                        y = 2.0 * self.a - y;
                    } else {
                        break;
                    }
                },
            }
        }
        self.value = y;
        self.reg0 += d0;
        self.reg_a += da;
        self.noise += xi;
        self.steps += 1;
        Step {
            value: y,
            noise: xi,
            d_reg0: d0,
            d_reg_a: da,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `2 R0`, the local time at 0 accumulated so far.
    pub fn lower_local_time(&self) -> f64 {
        2.0 * self.reg0
    }

    pub fn upper_local_time(&self) -> f64 {
        2.0 * self.reg_a
    }

    /// Cumulative raw Gaussian noise.
    pub fn noise(&self) -> f64 {
        self.noise
    }
}

/// A height path on a uniform grid together with its cumulative regulators
/// and the cumulative raw Gaussian noise that drove it.
///
/// All four sequences have one entry per grid point, starting at time 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    dt: f64,
    ceiling: f64,
    theta: f64,
    values: Vec<f64>,
    reg0: Vec<f64>,
    reg_a: Vec<f64>,
    noise: Vec<f64>,
}

impl GridPath {
    /// Assembles a path from its parts after checking the structural
    /// invariants (lengths, confinement, monotone regulators starting at 0).
    pub fn from_parts(
        dt: f64,
        ceiling: f64,
        theta: f64,
        values: Vec<f64>,
        reg0: Vec<f64>,
        reg_a: Vec<f64>,
        noise: Vec<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(domain("dt", dt));
        }
        if !(ceiling > 0.0) {
            return Err(domain("ceiling", ceiling));
        }
        let n = values.len();
        if n == 0 || reg0.len() != n || reg_a.len() != n || noise.len() != n {
            return Err(Error::Config(format!(
                "mismatched path sequences: {} values, {} reg0, {} reg_a, {} noise",
                n,
                reg0.len(),
                reg_a.len(),
                noise.len()
            )));
        }
        if let Some(&v) = values.iter().find(|&&v| !(0.0..=ceiling).contains(&v)) {
            return Err(domain("path value", v));
        }
        for reg in [&reg0, &reg_a] {
            if reg[0] != 0.0 || reg.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config("regulators must start at 0 and be nondecreasing".into()));
            }
        }
        Ok(Self {
            dt,
            ceiling,
            theta,
            values,
            reg0,
            reg_a,
            noise,
        })
    }

    /// A synthetic driftless path: every move is attributed to the noise and
    /// the regulators stay at 0.
    pub fn from_values(dt: f64, ceiling: f64, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        let noise = values.iter().map(|v| v - values.first().copied().unwrap_or(0.0)).collect();
        Self::from_parts(dt, ceiling, 0.0, values, vec![0.0; n], vec![0.0; n], noise)
    }

    pub(crate) fn from_parts_unchecked(
        dt: f64,
        ceiling: f64,
        theta: f64,
        values: Vec<f64>,
        reg0: Vec<f64>,
        reg_a: Vec<f64>,
        noise: Vec<f64>,
    ) -> Self {
        debug_assert!(values.len() == reg0.len() && values.len() == reg_a.len() && values.len() == noise.len());
        Self {
            dt,
            ceiling,
            theta,
            values,
            reg0,
            reg_a,
            noise,
        }
    }

    /// Same path, declared to follow drift `-2 theta` (for pruned paths,
    /// whose law is that of a different parameter than their base).
    pub(crate) fn relabel_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub(crate) fn with_capacity(cfg: &ReflectedBmConfig, n: usize) -> Self {
        let mut path = Self {
            dt: cfg.dt,
            ceiling: cfg.a,
            theta: cfg.theta,
            values: Vec::with_capacity(n + 1),
            reg0: Vec::with_capacity(n + 1),
            reg_a: Vec::with_capacity(n + 1),
            noise: Vec::with_capacity(n + 1),
        };
        path.values.push(0.0);
        path.reg0.push(0.0);
        path.reg_a.push(0.0);
        path.noise.push(0.0);
        path
    }

    #[inline]
    pub(crate) fn push(&mut self, stepper: &Stepper) {
        self.values.push(stepper.value);
        self.reg0.push(stepper.reg0);
        self.reg_a.push(stepper.reg_a);
        self.noise.push(stepper.noise);
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Upper barrier the path is confined below.
    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn reg0(&self) -> &[f64] {
        &self.reg0
    }

    pub fn reg_a(&self) -> &[f64] {
        &self.reg_a
    }

    /// Cumulative raw Gaussian increments.
    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Grid index of time `t`, rejecting times beyond the horizon.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) {
            return Err(domain("t", t));
        }
        let i = (t / self.dt + 1e-9).floor() as usize;
        if i > self.steps() {
            return Err(domain("t beyond path horizon", t));
        }
        Ok(i)
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        Ok(self.values[self.index_at(t)?])
    }

    /// Residual of `Y_n = B_n - 2 theta n dt + R0_n - Ra_n`, largest over the
    /// path. Zero up to rounding for every simulated path.
    pub fn tanaka_residual(&self) -> f64 {
        let drift = -2.0 * self.theta * self.dt;
        (0..self.len())
            .map(|i| {
                let rhs = self.noise[i] + drift * i as f64 + self.reg0[i] - self.reg_a[i];
                (self.values[i] - rhs).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Dumps `t,value,reg0,reg_a` rows with a header.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,value,reg0,regA")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{}",
                i as f64 * self.dt,
                self.values[i],
                self.reg0[i],
                self.reg_a[i]
            )?;
        }
        Ok(())
    }
}

/// Simulates `n_steps` grid steps started from 0.
pub fn simulate_reflected<R: Rng + ?Sized>(
    cfg: &ReflectedBmConfig,
    n_steps: usize,
    rng: &mut R,
) -> Result<GridPath> {
    cfg.validate()?;
    if n_steps > cfg.max_steps {
        return Err(Error::Config(format!(
            "{n_steps} steps requested, budget is {}",
            cfg.max_steps
        )));
    }
    let mut stepper = Stepper::new(cfg);
    let mut path = GridPath::with_capacity(cfg, n_steps);
    for _ in 0..n_steps {
        stepper.step(rng);
        path.push(&stepper);
    }
    Ok(path)
}

/// Simulates until `done` returns true for the newest step (it is also asked
/// about the starting point, as a step with value 0 and no increments).
pub fn simulate_until<R, F>(cfg: &ReflectedBmConfig, rng: &mut R, mut done: F) -> Result<GridPath>
where
    R: Rng + ?Sized,
    F: FnMut(&Step, &Stepper) -> bool,
{
    cfg.validate()?;
    let mut stepper = Stepper::new(cfg);
    let mut path = GridPath::with_capacity(cfg, 1024);
    let start = Step {
        value: 0.0,
        noise: 0.0,
        d_reg0: 0.0,
        d_reg_a: 0.0,
    };
    if done(&start, &stepper) {
        return Ok(path);
    }
    loop {
        if stepper.steps() >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                local_time: stepper.lower_local_time(),
                target: f64::NAN,
                partial: Box::new(path),
            });
        }
        let step = stepper.step(rng);
        path.push(&stepper);
        if done(&step, &stepper) {
            return Ok(path);
        }
    }
}

/// Value at time `t` of a fresh path, without storing the path.
pub fn sample_marginal<R: Rng + ?Sized>(cfg: &ReflectedBmConfig, t: f64, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    if !(t >= 0.0) {
        return Err(domain("t", t));
    }
    let n = (t / cfg.dt + 1e-9).floor() as usize;
    let mut stepper = Stepper::new(cfg);
    for _ in 0..n {
        stepper.step(rng);
    }
    Ok(stepper.value())
}

/// Band `[r - eps/2, r + eps/2]` clipped to `[0, ceiling]`.
fn band(r: f64, eps: f64, ceiling: f64) -> Result<(f64, f64)> {
    if !(0.0..=ceiling).contains(&r) {
        return Err(domain("level outside [0, a]", r));
    }
    if !(eps > 0.0) {
        return Err(domain("epsilon", eps));
    }
    Ok(((r - 0.5 * eps).max(0.0), (r + 0.5 * eps).min(ceiling)))
}

/// Occupation-density estimate of the local time at level `r` up to `t`:
/// time spent in the band around `r` divided by the band's width. At a
/// barrier the band is only the half inside `[0, a]`.
///
/// Occupation is a left-point sum over the grid points in `[0, t)`.
pub fn band_local_time(path: &GridPath, r: f64, epsilon: f64, t: f64) -> Result<f64> {
    let (lo, hi) = band(r, epsilon, path.ceiling)?;
    let n = path.index_at(t)?;
    Ok(band_count(&path.values[..n], lo, hi) as f64 * path.dt / (hi - lo))
}

#[inline]
pub(crate) fn band_count(values: &[f64], lo: f64, hi: f64) -> usize {
    values.iter().filter(|&&v| v >= lo && v <= hi).count()
}

/// `2 x` the accumulated regulator at `t`.
pub fn boundary_local_time(path: &GridPath, which: Boundary, t: f64) -> Result<f64> {
    let i = path.index_at(t)?;
    Ok(2.0
        * match which {
            Boundary::Lower => path.reg0[i],
            Boundary::Upper => path.reg_a[i],
        })
}

/// Invariant density of the reflected process on `[0, a]`:
/// `4 theta e^{-4 theta x} / (1 - e^{-4 theta a})`, uniform at `theta = 0`.
pub fn stationary_density(theta: f64, a: f64, x: f64) -> f64 {
    if !(0.0..=a).contains(&x) {
        return 0.0;
    }
    if theta.abs() < crate::csbp::THETA_SWITCH {
        return 1.0 / a;
    }
    let k = 4.0 * theta;
    -k * (-k * x).exp() / (-k * a).exp_m1()
}

pub fn stationary_cdf(theta: f64, a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= a {
        return 1.0;
    }
    if theta.abs() < crate::csbp::THETA_SWITCH {
        return x / a;
    }
    let k = 4.0 * theta;
    (-k * x).exp_m1() / (-k * a).exp_m1()
}

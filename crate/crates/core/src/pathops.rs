//! Time changes of grid paths: the clock of time spent below a level, the
//! projection that deletes all time spent above it, and stopping at a given
//! amount of local time at 0.

use rand::Rng;

use crate::error::{domain, Error, Result};
use crate::reflected::{simulate_until, GridPath, ReflectedBmConfig};

/// `A_i = dt * #{j < i : value_j <= b}`, the time spent at or below `b`
/// before grid point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clock {
    dt: f64,
    counts: Vec<usize>,
    kept: Vec<usize>,
}

impl Clock {
    pub fn below(path: &GridPath, b: f64) -> Result<Self> {
        if !(b > 0.0) {
            return Err(domain("b", b));
        }
        Ok(Self::from_mask(path.dt(), path.values().iter().map(|&v| v <= b)))
    }

    pub(crate) fn from_mask<I: IntoIterator<Item = bool>>(dt: f64, mask: I) -> Self {
        let mut counts = vec![0];
        let mut kept = Vec::new();
        for (i, k) in mask.into_iter().enumerate() {
            if k {
                kept.push(i);
            }
            counts.push(kept.len());
        }
        Self { dt, counts, kept }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `A` at grid point `i`; `i` may be one past the last point.
    pub fn at(&self, i: usize) -> f64 {
        self.counts[i] as f64 * self.dt
    }

    /// Clock values at every grid point, plus the total after the last one.
    pub fn values(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 * self.dt).collect()
    }

    pub fn total(&self) -> f64 {
        self.kept.len() as f64 * self.dt
    }

    /// Grid indices the clock runs on.
    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    /// Right-continuous inverse `C(t) = inf{ i : A_{i+1} > t }`; `None` when
    /// the clock never gets past `t`.
    pub fn inverse(&self, t: f64) -> Option<usize> {
        if t < 0.0 {
            return None;
        }
        let k = (t / self.dt + 1e-9).floor() as usize;
        self.kept.get(k).copied()
    }
}

/// `dt * #{grid points s <= t with value <= b}`.
pub fn time_below(path: &GridPath, b: f64, t: f64) -> Result<f64> {
    let n = path.index_at(t)?;
    Ok(path.values()[..=n].iter().filter(|&&v| v <= b).count() as f64 * path.dt())
}

/// How the upper regulator of a spliced path is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TopRegulator {
    /// Whatever the kept noise, drift and lower regulator do not explain is
    /// attributed to the ceiling, so the spliced path satisfies the discrete
    /// Tanaka identity. Correct for projections, where every splice removes an
    /// excursion above the new ceiling.
    Residual,
    /// Keep only the original upper-regulator increments of steps that end on
    /// a kept point (the time-changed regulator).
    Restrict,
}

/// Subsequence of `path` at `kept` indices, concatenated on the same grid.
/// The lower regulator is subsampled (cumulative, so increments on dropped
/// steps carry over to the next kept point); the noise of spliced step `k` is
/// the raw increment of the original step leaving kept point `k`.
pub(crate) fn splice(path: &GridPath, kept: &[usize], ceiling: f64, top: TopRegulator) -> GridPath {
    let m = kept.len();
    let dt = path.dt();
    let drift = -2.0 * path.theta() * dt;
    let (v, r0, ra, nz) = (path.values(), path.reg0(), path.reg_a(), path.noise());
    let mut values = Vec::with_capacity(m);
    let mut reg0 = Vec::with_capacity(m);
    let mut reg_top = Vec::with_capacity(m);
    let mut noise = Vec::with_capacity(m);
    let (mut upper, mut beta) = (0.0, 0.0);
    for (k, &i) in kept.iter().enumerate() {
        values.push(v[i]);
        reg0.push(r0[i]);
        if k > 0 {
            let p = kept[k - 1];
            let xi = nz[p + 1] - nz[p];
            beta += xi;
            let inc = match top {
                TopRegulator::Residual => v[p] + drift + xi + (r0[i] - r0[p]) - v[i],
                TopRegulator::Restrict => ra[i] - ra[i - 1],
            };
            // rounding in the cumulative noise can leave -1e-16 residues
            upper += inc.max(0.0);
        }
        reg_top.push(upper);
        noise.push(beta);
    }
    // Re-base the lower regulator so it starts at 0 like every other path.
    if let Some(&first) = reg0.first() {
        if first != 0.0 {
            reg0.iter_mut().for_each(|r| *r -= first);
        }
    }
    GridPath::from_parts_unchecked(dt, ceiling, path.theta(), values, reg0, reg_top, noise)
}

/// Deletes the time `path` spends above `b`: the grid samples with value
/// `<= b`, concatenated. `b` equal to the path's ceiling is the identity.
///
/// If the path ends above `b` the projection simply stops at the last kept
/// sample.
pub fn project(path: &GridPath, b: f64) -> Result<GridPath> {
    if !(b > 0.0) || b > path.ceiling() {
        return Err(domain("projection level", b));
    }
    let clock = Clock::below(path, b)?;
    if clock.kept_indices().is_empty() {
        return Err(Error::Config(format!("path never visits [0, {b}]")));
    }
    Ok(splice(path, clock.kept_indices(), b, TopRegulator::Residual))
}

/// Simulates until the local time at 0 first exceeds `x` and returns the path
/// up to and including that step.
pub fn stop_at_local_time<R: Rng + ?Sized>(cfg: &ReflectedBmConfig, x: f64, rng: &mut R) -> Result<GridPath> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain("x", x));
    }
    simulate_until(cfg, rng, |_, s| s.lower_local_time() > x).map_err(|e| match e {
        Error::MaxStepsExceeded {
            max_steps,
            local_time,
            partial,
            ..
        } => Error::MaxStepsExceeded {
            max_steps,
            local_time,
            target: x,
            partial,
        },
        other => other,
    })
}

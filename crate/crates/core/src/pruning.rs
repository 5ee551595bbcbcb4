//! Pruning by Poisson marks on the genealogy coded by a height path.
//!
//! A height path codes a tree: the ancestral line of time `s` is `[0, H_s]`,
//! and the lines of `s < s'` share `[0, min_{[s, s']} H]`. Marks are laid at
//! rate `4 gamma` per unit length along the line of the current time and held
//! in a stack; descending below a mark destroys it for good, since any later
//! ascent is a new branch. A time is kept when its line carries no mark, and
//! deleting the other times gives the pruned path.
//!
//! Within one grid step the two lines split at the step's running minimum,
//! drawn from the Brownian bridge between the endpoints (0 when the step
//! reflected at 0).
//!
//! Each mark carries a uniform label. Keeping the marks with label below
//! `g / gamma` is a rate `4 g` mark process on the same tree, which gives the
//! coupled pruning at every `g <= gamma` from a single replay.

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{domain, Error, Result};
use crate::pathops::{splice, TopRegulator};
use crate::reflected::{GridPath, ReflectedBmConfig, Stepper};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mark {
    pub height: f64,
    pub label: f64,
}

/// A mark laid during step `step` (from grid point `step` to `step + 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Birth {
    pub step: usize,
    pub mark: Mark,
}

/// Lowest point of a Brownian bridge of variance `dt` from `y0` to `y1`,
/// floored at 0.
fn bridge_minimum<R: Rng + ?Sized>(y0: f64, y1: f64, dt: f64, rng: &mut R) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    let d = y1 - y0;
    (0.5 * (y0 + y1 - (d * d - 2.0 * dt * u.ln()).sqrt())).max(0.0)
}

/// The mark stack along the current lineage, advanced one grid step at a time.
#[derive(Debug, Clone)]
pub struct MarkReplayer {
    rate: f64,
    stack: Vec<Mark>,
}

impl MarkReplayer {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(domain("gamma", gamma));
        }
        Ok(Self {
            rate: 4.0 * gamma,
            stack: Vec::new(),
        })
    }

    /// Moves the lineage across a step from `from` to `to`, calling `born` on
    /// every new mark. Returns the height where the old and new lines split.
    /// Draws nothing when `gamma` is 0.
    pub fn advance<R, F>(&mut self, from: f64, to: f64, dt: f64, touched_zero: bool, rng: &mut R, mut born: F) -> f64
    where
        R: Rng + ?Sized,
        F: FnMut(Mark),
    {
        if self.rate == 0.0 {
            return from.min(to);
        }
        let split = if touched_zero { 0.0 } else { bridge_minimum(from, to, dt, rng) };
        self.cut(split);
        let mut h = split;
        loop {
            h += rng.sample::<f64, _>(Exp1) / self.rate;
            if h > to {
                break;
            }
            let mark = Mark {
                height: h,
                label: rng.random(),
            };
            self.stack.push(mark);
            born(mark);
        }
        split
    }

    fn cut(&mut self, split: f64) {
        while self.stack.last().is_some_and(|m| m.height > split) {
            self.stack.pop();
        }
    }

    pub fn is_clear(&self) -> bool {
        self.stack.is_empty()
    }

    /// Height of the first mark on the current lineage.
    pub fn lowest(&self) -> Option<f64> {
        self.stack.first().map(|m| m.height)
    }

    pub fn stack(&self) -> &[Mark] {
        &self.stack
    }
}

/// A base path with its mark history and keep mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedPath {
    base: GridPath,
    gamma: f64,
    keep: Vec<bool>,
    /// Lowest live mark at each grid point, `INFINITY` when there is none.
    lowest: Vec<f64>,
    /// Split height of each step; empty when `gamma` is 0.
    splits: Vec<f64>,
    births: Vec<Birth>,
}

struct Recorder {
    replayer: MarkReplayer,
    keep: Vec<bool>,
    lowest: Vec<f64>,
    splits: Vec<f64>,
    births: Vec<Birth>,
    kept: usize,
}

impl Recorder {
    fn new(gamma: f64, capacity: usize) -> Result<Self> {
        let mut keep = Vec::with_capacity(capacity);
        let mut lowest = Vec::with_capacity(capacity);
        keep.push(true);
        lowest.push(f64::INFINITY);
        Ok(Self {
            replayer: MarkReplayer::new(gamma)?,
            keep,
            lowest,
            splits: Vec::new(),
            births: Vec::new(),
            kept: 1,
        })
    }

    fn step<R: Rng + ?Sized>(&mut self, from: f64, to: f64, dt: f64, touched_zero: bool, rng: &mut R) {
        let step = self.keep.len() - 1;
        let births = &mut self.births;
        let split = self
            .replayer
            .advance(from, to, dt, touched_zero, rng, |mark| births.push(Birth { step, mark }));
        if self.replayer.rate > 0.0 {
            self.splits.push(split);
        }
        debug_assert!(self.replayer.stack.windows(2).all(|w| w[0].height < w[1].height));
        debug_assert!(self.replayer.stack.last().is_none_or(|m| m.height <= to));
        let clear = self.replayer.is_clear();
        self.kept += usize::from(clear);
        self.keep.push(clear);
        self.lowest.push(self.replayer.lowest().unwrap_or(f64::INFINITY));
    }

    fn finish(self, base: GridPath, gamma: f64) -> MarkedPath {
        MarkedPath {
            base,
            gamma,
            keep: self.keep,
            lowest: self.lowest,
            splits: self.splits,
            births: self.births,
        }
    }
}

/// Lays marks at rate `4 gamma` on the tree coded by `path`.
pub fn mark_replay<R: Rng + ?Sized>(path: &GridPath, gamma: f64, rng: &mut R) -> Result<MarkedPath> {
    let mut rec = Recorder::new(gamma, path.len())?;
    let (v, r0) = (path.values(), path.reg0());
    for k in 0..path.steps() {
        rec.step(v[k], v[k + 1], path.dt(), r0[k + 1] > r0[k], rng);
    }
    Ok(rec.finish(path.clone(), gamma))
}

/// Simulates a base path and its marks together until `done(kept, stepper)`,
/// where `kept` counts kept grid points so far.
fn simulate_marked<R, F>(cfg: &ReflectedBmConfig, gamma: f64, rng: &mut R, mut done: F) -> Result<MarkedPath>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &Stepper) -> bool,
{
    cfg.validate()?;
    let mut stepper = Stepper::new(cfg);
    let mut path = GridPath::with_capacity(cfg, 1024);
    let mut rec = Recorder::new(gamma, 1024)?;
    while !done(rec.kept, &stepper) {
        if stepper.steps() >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                local_time: stepper.lower_local_time(),
                target: f64::NAN,
                partial: Box::new(path),
            });
        }
        let from = stepper.value();
        let step = stepper.step(rng);
        path.push(&stepper);
        rec.step(from, step.value, cfg.dt, step.d_reg0 > 0.0, rng);
    }
    Ok(rec.finish(path, gamma))
}

/// A marked path stopped when its local time at 0 first exceeds `x`.
pub fn mark_stopped<R: Rng + ?Sized>(cfg: &ReflectedBmConfig, gamma: f64, x: f64, rng: &mut R) -> Result<MarkedPath> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain("x", x));
    }
    simulate_marked(cfg, gamma, rng, |_, s| s.lower_local_time() > x).map_err(|e| match e {
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

/// Stopped base path and its pruning, coupled.
pub fn prune_stopped<R: Rng + ?Sized>(
    cfg: &ReflectedBmConfig,
    gamma: f64,
    x: f64,
    rng: &mut R,
) -> Result<(GridPath, GridPath)> {
    let marked = mark_stopped(cfg, gamma, x, rng)?;
    let pruned = prune(&marked);
    Ok((marked.into_base(), pruned))
}

/// A pruned path with `kept_steps` steps, simulating the base as long as
/// needed.
pub fn simulate_pruned<R: Rng + ?Sized>(
    cfg: &ReflectedBmConfig,
    gamma: f64,
    kept_steps: usize,
    rng: &mut R,
) -> Result<GridPath> {
    let marked = simulate_marked(cfg, gamma, rng, |kept, _| kept > kept_steps)?;
    Ok(prune(&marked))
}

/// Deletes the unkept times of the base path. The result is labelled with
/// parameter `theta + gamma`. Its lower regulator matches the base's at the
/// end whenever the last grid point is kept; the upper regulator keeps the
/// base increments of steps landing on kept points.
pub fn prune(marked: &MarkedPath) -> GridPath {
    let theta = marked.base.theta() + marked.gamma;
    if marked.keep.iter().all(|&k| k) {
        return marked.base.clone().relabel_theta(theta);
    }
    let kept = marked.kept_indices();
    splice(&marked.base, &kept, marked.base.ceiling(), TopRegulator::Restrict).relabel_theta(theta)
}

/// Mean of the band exit local time `(1/eps) int_0^{T_x} 1{tau < H < tau + eps}`
/// for the rate `4 gamma` marks, with `tau` the lowest mark. The lineage at
/// height `r` is weighted by `e^{-4 theta r}` and the first mark is
/// exponential, so this is
/// `x int_0^a e^{-4 theta r} (e^{-c (r - eps)^+} - e^{-c r}) / eps dr`, `c = 4 gamma`.
pub fn exit_band_mean(theta: f64, gamma: f64, a: f64, x: f64, epsilon: f64) -> f64 {
    let c = 4.0 * gamma;
    let f = |r: f64| (-4.0 * theta * r).exp() * ((-c * (r - epsilon).max(0.0)).exp() - (-c * r).exp()) / epsilon;
    // the integrand has a kink at eps; integrate the two pieces separately
    let e = epsilon.min(a);
    x * (simpson(&f, 0.0, e, 2_000) + simpson(&f, e, a, 20_000))
}

/// `4 gamma E[A_{T_x}] = 4 gamma x int_0^a e^{-4 (theta + gamma) r} dr`.
pub fn kept_clock_mean(theta: f64, gamma: f64, a: f64, x: f64) -> f64 {
    let k = 4.0 * (theta + gamma);
    let integral = if k.abs() < 1e-12 { a } else { -(-k * a).exp_m1() / k };
    4.0 * gamma * x * integral
}

fn simpson<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, n: usize) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(lo) + f(hi) + inner) * h / 3.0
}

impl MarkedPath {
    pub fn base(&self) -> &GridPath {
        &self.base
    }

    pub fn into_base(self) -> GridPath {
        self.base
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn births(&self) -> &[Birth] {
        &self.births
    }

    /// Split height of each step (empty when `gamma` is 0).
    pub fn splits(&self) -> &[f64] {
        &self.splits
    }

    pub fn lowest_mark(&self, i: usize) -> Option<f64> {
        Some(self.lowest[i]).filter(|h| h.is_finite())
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    /// `A` at the end of the path: `dt * #{i < n : kept}`.
    pub fn kept_time(&self) -> f64 {
        self.keep[..self.base.steps()].iter().filter(|&&k| k).count() as f64 * self.base.dt()
    }

    /// Band estimate of the exit local time from `{0}` of the mark count
    /// along the lineage: time with the height within `eps` above the first
    /// mark, over `eps`. Left-point sum over the whole path.
    pub fn exit_local_time(&self, epsilon: f64) -> Result<f64> {
        if !(epsilon > 0.0) {
            return Err(domain("epsilon", epsilon));
        }
        let n = self.base.steps();
        let hits = self.base.values()[..n]
            .iter()
            .zip(&self.lowest)
            .filter(|&(&v, &low)| v > low && v < low + epsilon)
            .count();
        Ok(hits as f64 * self.base.dt() / epsilon)
    }

    /// The coupled marking at rate `4 gamma2`, `gamma2 <= gamma`: the marks
    /// whose label is below `gamma2 / gamma`, replayed on the same splits.
    pub fn thin(&self, gamma2: f64) -> Result<MarkedPath> {
        if !(0.0..=self.gamma).contains(&gamma2) {
            return Err(domain("thinned gamma", gamma2));
        }
        let n = self.base.len();
        let frac = if self.gamma > 0.0 { gamma2 / self.gamma } else { 0.0 };
        let births: Vec<Birth> = self.births.iter().copied().filter(|b| b.mark.label < frac).collect();
        let mut keep = Vec::with_capacity(n);
        let mut lowest = Vec::with_capacity(n);
        keep.push(true);
        lowest.push(f64::INFINITY);
        let mut stack: Vec<f64> = Vec::new();
        let mut next = births.iter().peekable();
        for (k, &split) in self.splits.iter().enumerate() {
            while stack.last().is_some_and(|&h| h > split) {
                stack.pop();
            }
            while let Some(b) = next.next_if(|b| b.step == k) {
                stack.push(b.mark.height);
            }
            keep.push(stack.is_empty());
            lowest.push(stack.first().copied().unwrap_or(f64::INFINITY));
        }
        // gamma == 0 records no splits: nothing is ever marked
        keep.resize(n, true);
        lowest.resize(n, f64::INFINITY);
        Ok(MarkedPath {
            base: self.base.clone(),
            gamma: gamma2,
            keep,
            lowest,
            splits: if gamma2 > 0.0 { self.splits.clone() } else { Vec::new() },
            births,
        })
    }

    /// Columns `t,value,keep,lowest_mark`; the last is empty when no mark is live.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,value,keep,lowest_mark")?;
        let dt = self.base.dt();
        for (i, v) in self.base.values().iter().enumerate() {
            let low = self.lowest_mark(i).map(|h| h.to_string()).unwrap_or_default();
            writeln!(w, "{},{v},{},{low}", i as f64 * dt, u8::from(self.keep[i]))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reflected::{boundary_local_time, simulate_reflected, Boundary};
    use crate::rng::path_rng;
    use crate::stats::{ks_two_sample, mean_se};
    use proptest::prelude::*;

    #[test]
    fn zero_rate_marks_nothing() {
        let c = ReflectedBmConfig::new(0.0, 1.0, 1e-3).unwrap();
        let mut rng = path_rng(1, "t", 0);
        let p = simulate_reflected(&c, 5_000, &mut rng).unwrap();
        let m = mark_replay(&p, 0.0, &mut rng).unwrap();
        assert!(m.keep().iter().all(|&k| k));
        assert!(m.births().is_empty());
        let q = prune(&m);
        assert_eq!(q.values(), p.values());
        assert_eq!(q.reg0(), p.reg0());
        assert_eq!(q.reg_a(), p.reg_a());
        let (base, pruned) = prune_stopped(&c, 0.0, 0.5, &mut rng).unwrap();
        assert_eq!(base.values(), pruned.values());
        assert!(MarkReplayer::new(-1.0).is_err());
    }

    #[test]
    fn tent_apex_survives_with_poisson_void_probability() {
        // 0 -> r -> 0 in small linear steps; the apex lineage has length r
        let (r, gamma, k) = (0.5, 0.8, 500);
        let mut values: Vec<f64> = (0..=k).map(|i| r * i as f64 / k as f64).collect();
        values.extend((0..k).rev().map(|i| r * i as f64 / k as f64));
        let p = GridPath::from_values(1e-10, 1.0, values).unwrap();
        let n = 20_000;
        let hits: Vec<f64> = (0..n)
            .map(|i| {
                let m = mark_replay(&p, gamma, &mut path_rng(2, "tent", i)).unwrap();
                assert!(*m.keep().last().unwrap());
                f64::from(u8::from(m.keep()[k]))
            })
            .collect();
        let (mean, se) = mean_se(&hits);
        let target = (-4.0 * gamma * r).exp();
        assert!((mean - target).abs() < 3.0 * se, "{mean} vs {target}");
    }

    #[test]
    fn thinning_to_full_rate_reproduces_the_replay() {
        let c = ReflectedBmConfig::new(0.0, 1.0, 1e-3).unwrap();
        let mut rng = path_rng(3, "t", 0);
        let p = simulate_reflected(&c, 20_000, &mut rng).unwrap();
        let m = mark_replay(&p, 1.0, &mut rng).unwrap();
        let same = m.thin(1.0).unwrap();
        assert_eq!(same.keep(), m.keep());
        assert_eq!(same.lowest, m.lowest);
        assert!(m.thin(0.0).unwrap().keep().iter().all(|&k| k));
        assert!(m.thin(1.5).is_err());
    }

    #[test]
    fn pruned_lower_local_time_when_last_point_kept() {
        let c = ReflectedBmConfig::new(-0.5, 1.0, 1e-4).unwrap();
        let mut checked = 0;
        for i in 0..20 {
            let mut rng = path_rng(4, "t", i);
            let m = mark_stopped(&c, 1.0, 1.0, &mut rng).unwrap();
            let q = prune(&m);
            if *m.keep().last().unwrap() {
                let lb = boundary_local_time(m.base(), Boundary::Lower, m.base().horizon()).unwrap();
                let lq = boundary_local_time(&q, Boundary::Lower, q.horizon()).unwrap();
                assert!((lb - lq).abs() < 1e-12);
                checked += 1;
            }
            assert!(q.values().iter().zip(q.values().iter().skip(1)).count() + 1 == q.len());
            assert!((q.theta() - 0.5).abs() < 1e-15);
        }
        assert!(checked >= 15);
    }

    #[test]
    fn exit_band_mean_tends_to_the_kept_clock() {
        for (theta, gamma, a) in [(0.0, 0.5, 1.0), (-0.5, 1.0, 1.0), (0.3, 0.2, 2.0)] {
            let limit = exit_band_mean(theta, gamma, a, 1.0, 1e-6);
            assert!((limit - kept_clock_mean(theta, gamma, a, 1.0)).abs() < 1e-4);
        }
        // at theta = 0, gamma = 1/2, a = 1 the clock side is 1 - e^{-2}
        assert!((kept_clock_mean(0.0, 0.5, 1.0, 1.0) - (1.0 - (-2.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn critical_pruned_stopping_time() {
        // theta + gamma = 0: E[T] = x int_0^1 dr = 1
        let c = ReflectedBmConfig::new(-1.0, 1.0, 1e-4).unwrap();
        let n = 400;
        let (mut t, mut over) = (Vec::new(), 0.0);
        for i in 0..n {
            let (base, pruned) = prune_stopped(&c, 1.0, 1.0, &mut path_rng(5, "t", i)).unwrap();
            t.push(pruned.horizon());
            over += 2.0 * base.reg0()[base.steps()] - 1.0;
        }
        let (mean, se) = mean_se(&t);
        let bias = over / n as f64 + 2.0 * 1e-2;
        assert!((mean - 1.0).abs() < 3.0 * se + bias, "{mean} +- {se}");
    }

    #[test]
    fn pruning_twice_matches_pruning_once() {
        let c = ReflectedBmConfig::new(0.0, 1.0, 1e-3).unwrap();
        let n = 600;
        let kept = 1_000;
        let once: Vec<f64> = (0..n)
            .map(|i| *simulate_pruned(&c, 1.0, kept, &mut path_rng(6, "once", i)).unwrap().values().last().unwrap())
            .collect();
        let c1 = c.with_theta(0.0);
        let twice: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = path_rng(6, "twice", i);
                // the second pass keeps well over a tenth of the first
                let p = simulate_pruned(&c1, 0.5, 10 * kept, &mut rng).unwrap();
                let q = prune(&mark_replay(&p, 0.5, &mut rng).unwrap());
                q.values()[kept]
            })
            .collect();
        let r = ks_two_sample(&once, &twice).unwrap();
        assert!(r.pass, "{r:?}");
    }

    prop_compose! {
        fn grid_path()(steps in prop::collection::vec(-0.05f64..0.05, 1..300)) -> GridPath {
            let mut v = vec![0.0];
            for s in steps {
                let next: f64 = v.last().unwrap() + s;
                v.push(next.abs().min(1.0));
            }
            GridPath::from_values(1e-3, 1.0, v).unwrap()
        }
    }

    proptest! {
        #[test]
        fn stack_is_sorted_and_below_the_path(p in grid_path(), gamma in 0.0f64..5.0, seed in 0u64..1000) {
            let mut rng = path_rng(seed, "stack", 0);
            let mut rep = MarkReplayer::new(gamma).unwrap();
            let v = p.values();
            for k in 0..p.steps() {
                rep.advance(v[k], v[k + 1], p.dt(), false, &mut rng, |_| {});
                prop_assert!(rep.stack().windows(2).all(|w| w[0].height < w[1].height));
                prop_assert!(rep.stack().last().is_none_or(|m| m.height <= v[k + 1]));
            }
        }

        #[test]
        fn thinner_marks_keep_more(p in grid_path(), g1 in 0.0f64..1.0, g2 in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = path_rng(seed, "thin", 0);
            let m = mark_replay(&p, 4.0, &mut rng).unwrap();
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            let a = m.thin(4.0 * lo).unwrap();
            let b = m.thin(4.0 * hi).unwrap();
            for (ka, kb) in a.keep().iter().zip(b.keep()) {
                prop_assert!(*ka || !*kb);
            }
            prop_assert!(a.keep().iter().zip(m.keep()).all(|(ka, km)| *ka || !*km));
        }
    }
}

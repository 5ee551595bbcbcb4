//! Experiment configuration, execution and reporting.
//!
//! A run is described by an [`ExperimentConfig`] (flat TOML or CLI flags),
//! executed by [`run_experiment`], and written out as `report.json` plus one
//! CSV per table. Path `i` of a run always draws from
//! `stream(derive_key(seed, tag), i)`, so reports depend only on the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csbp::{csbp_path, BranchingParams};
use crate::error::{Error, Result};
use crate::heightfield::{field_samples, girsanov_check, laplace_bias, map_stopped, occupation_integral};
use crate::pathops::project;
use crate::pruning::{exit_band_mean, kept_clock_mean, mark_stopped, prune, simulate_pruned};
use crate::reflected::{sample_marginal, simulate_reflected, simulate_until, stationary_cdf, ReflectedBmConfig, DEFAULT_DT};
use crate::rng::{derive_key, stream};
use crate::stats::{ks_test, ks_two_sample, laplace_compare, mean_compare, mean_se, TestResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_PATHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RayKnight,
    Projection,
    Pruning,
    Occupation,
    Girsanov,
    Extinction,
    Stationary,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::RayKnight,
        Self::Projection,
        Self::Pruning,
        Self::Occupation,
        Self::Girsanov,
        Self::Extinction,
        Self::Stationary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RayKnight => "ray_knight",
            Self::Projection => "projection",
            Self::Pruning => "pruning",
            Self::Occupation => "occupation",
            Self::Girsanov => "girsanov",
            Self::Extinction => "extinction",
            Self::Stationary => "stationary",
        }
    }
}

fn default_a() -> f64 {
    1.0
}
fn default_x() -> f64 {
    1.0
}
fn default_lambdas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_paths() -> usize {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    /// Sub-barrier for projections; defaults to `a / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default = "default_x")]
    pub x: f64,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Field levels; defaults to `a / 4, a / 2`.
    #[serde(default)]
    pub levels: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Band width; defaults to `0.02 a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Marginal time (projection, pruning, stationary; default 5) or
    /// horizon (extinction; default 20).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            theta: 0.0,
            gamma: 0.0,
            a: default_a(),
            b: None,
            x: default_x(),
            lambdas: default_lambdas(),
            levels: Vec::new(),
            dt: default_dt(),
            epsilon: None,
            n_paths: default_paths(),
            seed: 0,
            t: None,
            max_steps: None,
            out: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_paths < MIN_PATHS {
            return bad(format!("n_paths must be at least {MIN_PATHS}, got {}", self.n_paths));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.a > 0.0) || !self.a.is_finite() {
            return bad(format!("a must be positive, got {}", self.a));
        }
        if !self.theta.is_finite() {
            return bad("theta must be finite".into());
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.x > 0.0) || !self.x.is_finite() {
            return bad(format!("x must be positive, got {}", self.x));
        }
        if let Some(b) = self.b {
            if !(b > 0.0 && b <= self.a) {
                return bad(format!("b must lie in (0, a], got {b}"));
            }
        }
        if let Some(l) = self.levels.iter().find(|&&l| !(0.0..=self.a).contains(&l)) {
            return bad(format!("level {l} outside [0, {}]", self.a));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("levels must be strictly increasing".into());
        }
        if let Some(l) = self.lambdas.iter().find(|&&l| !(l >= 0.0) || !l.is_finite()) {
            return bad(format!("lambda {l} must be nonnegative"));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e <= self.a) {
                return bad(format!("epsilon must lie in (0, a], got {e}"));
            }
        }
        if let Some(t) = self.t {
            if !(t > 0.0) || !t.is_finite() {
                return bad(format!("t must be positive, got {t}"));
            }
        }
        self.reflected(self.theta).validate()
    }

    fn reflected(&self, theta: f64) -> ReflectedBmConfig {
        let mut c = ReflectedBmConfig {
            theta,
            a: self.a,
            dt: self.dt,
            max_steps: crate::reflected::DEFAULT_MAX_STEPS,
            reflection: Default::default(),
        };
        if let Some(m) = self.max_steps {
            c.max_steps = m;
        }
        c
    }

    fn levels(&self) -> Vec<f64> {
        if self.levels.is_empty() {
            vec![0.25 * self.a, 0.5 * self.a]
        } else {
            self.levels.clone()
        }
    }

    fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(0.02 * self.a)
    }

    fn b(&self) -> f64 {
        self.b.unwrap_or(0.5 * self.a)
    }

    fn marginal_steps(&self) -> usize {
        (self.t.unwrap_or(5.0) / self.dt + 1e-9).floor() as usize
    }

    fn key(&self, tag: &str) -> u64 {
        derive_key(self.seed, &format!("{}/{tag}", self.kind.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedResult {
    pub name: String,
    #[serde(flatten)]
    pub result: TestResult,
}

/// A CSV table produced alongside the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.header.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub results: Vec<NamedResult>,
    pub pass: bool,
    pub runtime_seconds: f64,
    #[serde(skip)]
    pub tables: BTreeMap<String, Table>,
}

impl ExperimentReport {
    /// Writes `report.json` and `<table>.csv` files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        for (name, table) in &self.tables {
            table.write_csv(std::io::BufWriter::new(fs::File::create(dir.join(format!("{name}.csv")))?))?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Outcome {
    results: Vec<NamedResult>,
    tables: BTreeMap<String, Table>,
}

impl Outcome {
    fn push(&mut self, name: impl Into<String>, result: TestResult) {
        self.results.push(NamedResult {
            name: name.into(),
            result,
        });
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let outcome = match cfg.kind {
        ExperimentKind::RayKnight => ray_knight(cfg)?,
        ExperimentKind::Projection => projection(cfg)?,
        ExperimentKind::Pruning => pruning(cfg)?,
        ExperimentKind::Occupation => occupation(cfg)?,
        ExperimentKind::Girsanov => girsanov(cfg)?,
        ExperimentKind::Extinction => extinction(cfg)?,
        ExperimentKind::Stationary => stationary(cfg)?,
    };
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        kind: cfg.kind,
        seed: cfg.seed,
        config: cfg.clone(),
        pass: outcome.results.iter().all(|r| r.result.pass),
        results: outcome.results,
        runtime_seconds: start.elapsed().as_secs_f64(),
        tables: outcome.tables,
    })
}

/// Field Laplace comparisons for stopped paths of `sim`, against the
/// transform of parameter `theta_law`.
fn laplace_table(
    out: &mut Outcome,
    fields: &[crate::heightfield::LocalTimeField],
    cfg: &ExperimentConfig,
    theta_law: f64,
    prefix: &str,
) -> Result<()> {
    let params = BranchingParams::with_theta(theta_law)?;
    let over = fields.iter().map(|f| f.x - cfg.x).sum::<f64>() / fields.len() as f64;
    let mut table = Table::new(&["level", "lambda", "estimate", "std_error", "target", "tolerance", "pass"]);
    for (j, &r) in fields[0].levels.iter().enumerate() {
        let z: Vec<f64> = fields.iter().map(|f| f.z[j]).collect();
        let interior = r > 0.0 && r < cfg.a;
        for &lambda in &cfg.lambdas {
            let u = params.u_closed(lambda, r)?;
            let target = (-cfg.x * u).exp();
            let bias = laplace_bias(lambda, u, cfg.x, interior.then(|| cfg.epsilon()), over);
            let res = laplace_compare(&z, lambda, target)?.with_bias(bias);
            table.rows.push(vec![r, lambda, res.estimate, res.std_error, res.target, res.tolerance, f64::from(u8::from(res.pass))]);
            out.push(format!("{prefix}laplace r={r} lambda={lambda}"), res);
        }
    }
    out.tables.insert(format!("{prefix}laplace").trim_end_matches('_').replace(' ', "_"), table);
    Ok(())
}

fn ray_knight(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let fields = field_samples(&cfg.reflected(cfg.theta), cfg.x, &cfg.levels(), cfg.epsilon(), cfg.n_paths, cfg.key("paths"))?;
    laplace_table(&mut out, &fields, cfg, cfg.theta, "")?;
    let mut table = Table::new(&["path", "level", "z"]);
    for (i, f) in fields.iter().enumerate() {
        for (l, z) in f.levels.iter().zip(&f.z) {
            table.rows.push(vec![i as f64, *l, *z]);
        }
    }
    out.tables.insert("fields".into(), table);
    Ok(out)
}

fn marginal_table(a: &[f64], b: &[f64], names: [&str; 2]) -> Table {
    let mut t = Table::new(&["index", names[0], names[1]]);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        t.rows.push(vec![i as f64, *x, *y]);
    }
    t
}

fn projection(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let b = cfg.b();
    let base = cfg.reflected(cfg.theta);
    let n = cfg.marginal_steps();
    if b == cfg.a {
        let key = cfg.key("identity");
        let mismatches: usize = (0..cfg.n_paths)
            .into_par_iter()
            .map(|i| -> Result<usize> {
                let p = simulate_reflected(&base, n, &mut stream(key, i as u64))?;
                let q = project(&p, b)?;
                Ok(usize::from(q.values() != p.values() || q.reg0() != p.reg0()))
            })
            .sum::<Result<usize>>()?;
        out.push("identity at b = a", exact(mismatches as f64, cfg.n_paths));
        return Ok(out);
    }
    let key = cfg.key("projected");
    let projected: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut below = 0;
            let p = simulate_until(&base, &mut stream(key, i as u64), |s, _| {
                below += usize::from(s.value <= b);
                below > n
            })?;
            Ok(project(&p, b)?.values()[n])
        })
        .collect::<Result<_>>()?;
    let direct_cfg = ReflectedBmConfig { a: b, ..base };
    let t = n as f64 * cfg.dt;
    let key = cfg.key("direct");
    let direct: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| sample_marginal(&direct_cfg, t, &mut stream(key, i as u64)))
        .collect::<Result<_>>()?;
    out.push(format!("KS projected vs direct at t={t}"), ks_two_sample(&projected, &direct)?);
    out.tables.insert("marginals".into(), marginal_table(&projected, &direct, ["projected", "direct"]));

    let mid = 0.5 * (b + cfg.a);
    let key = cfg.key("composition");
    let trials = cfg.n_paths.min(1_000);
    let mismatches: usize = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut rng = stream(key, i as u64);
            let len = rng.random_range(100..5_000);
            let p = simulate_reflected(&base, len, &mut rng)?;
            let direct = project(&p, b)?;
            let twice = project(&project(&p, mid)?, b)?;
            Ok(usize::from(direct.values() != twice.values() || direct.reg0() != twice.reg0()))
        })
        .sum::<Result<usize>>()?;
    out.push("composition mismatches", exact(mismatches as f64, trials));
    Ok(out)
}

/// An exact identity as a result: the number of violations against 0.
fn exact(violations: f64, n: usize) -> TestResult {
    TestResult::moment(violations, 0.0, 0.0, 0.0, n as f64)
}

fn pruning(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let base = cfg.reflected(cfg.theta);
    let n = cfg.marginal_steps();
    let key = cfg.key("pruned");
    let pruned: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| Ok(simulate_pruned(&base, cfg.gamma, n, &mut stream(key, i as u64))?.values()[n]))
        .collect::<Result<_>>()?;
    let direct_cfg = cfg.reflected(cfg.theta + cfg.gamma);
    let t = n as f64 * cfg.dt;
    let key = cfg.key("direct");
    let direct: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| sample_marginal(&direct_cfg, t, &mut stream(key, i as u64)))
        .collect::<Result<_>>()?;
    out.push(format!("KS pruned vs direct theta+gamma at t={t}"), ks_two_sample(&pruned, &direct)?);
    out.tables.insert("marginals".into(), marginal_table(&pruned, &direct, ["pruned", "direct"]));

    // stopped paths: pruned field, and exit local time against the kept clock
    let eps = cfg.epsilon();
    let levels = cfg.levels();
    let key = cfg.key("stopped");
    let stopped: Vec<_> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let m = mark_stopped(&base, cfg.gamma, cfg.x, &mut stream(key, i as u64))?;
            let field = crate::heightfield::ray_knight_field(&prune(&m), &levels, eps)?;
            let gap = m.exit_local_time(eps)? - 4.0 * cfg.gamma * m.kept_time();
            Ok((field, gap))
        })
        .collect::<Result<_>>()?;
    let (fields, gaps): (Vec<_>, Vec<f64>) = stopped.into_iter().unzip();
    laplace_table(&mut out, &fields, cfg, cfg.theta + cfg.gamma, "pruned_")?;
    if cfg.gamma > 0.0 {
        let over = fields.iter().map(|f| f.x - cfg.x).sum::<f64>() / fields.len() as f64;
        let band = exit_band_mean(cfg.theta, cfg.gamma, cfg.a, cfg.x, eps) - kept_clock_mean(cfg.theta, cfg.gamma, cfg.a, cfg.x);
        out.push("exit local time - 4 gamma kept time", mean_compare(&gaps, band * (1.0 + over / cfg.x), 0.0)?);
    }
    Ok(out)
}

/// `(int_0^a e^{-k r} dr, int_0^a r e^{-k r} dr)`.
pub fn occupation_targets(k: f64, a: f64) -> (f64, f64) {
    if k.abs() < 1e-12 {
        return (a, 0.5 * a * a);
    }
    let e = (-k * a).exp();
    ((1.0 - e) / k, (1.0 - e * (1.0 + k * a)) / (k * k))
}

fn occupation(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let pairs = map_stopped(&cfg.reflected(cfg.theta), cfg.x, cfg.n_paths, cfg.key("paths"), |p, _| {
        Ok((occupation_integral(p, |_| 1.0), occupation_integral(p, |r| r)))
    })?;
    let (one, id): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let (t1, tr) = occupation_targets(4.0 * cfg.theta, cfg.a);
    out.push("g = 1", mean_compare(&one, cfg.x * t1, 0.0)?);
    out.push("g = r", mean_compare(&id, cfg.x * tr, 0.0)?);
    let mut table = Table::new(&["path", "int_1", "int_r"]);
    table.rows = pairs.iter().enumerate().map(|(i, (a, b))| vec![i as f64, *a, *b]).collect();
    out.tables.insert("occupation".into(), table);
    Ok(out)
}

fn girsanov(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut table = Table::new(&["lambda", "target", "direct", "direct_se", "reweighted", "reweighted_se", "ess"]);
    for (j, &lambda) in cfg.lambdas.iter().enumerate() {
        let seed = cfg.key(&format!("lambda{j}"));
        let r = girsanov_check(&cfg.reflected(0.0), cfg.theta, lambda, cfg.x, cfg.n_paths, seed)?;
        table.rows.push(vec![
            lambda,
            r.target,
            r.direct.estimate,
            r.direct.std_error,
            r.reweighted.estimate,
            r.reweighted.std_error,
            r.ess,
        ]);
        out.push(format!("direct lambda={lambda}"), r.direct);
        out.push(format!("reweighted lambda={lambda}"), r.reweighted);
    }
    out.tables.insert("girsanov".into(), table);
    Ok(out)
}

fn extinction(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let params = BranchingParams::with_theta(cfg.theta)?;
    let horizon = cfg.t.unwrap_or(20.0);
    let key = cfg.key("chains");
    let extinct: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| Ok(f64::from(u8::from(csbp_path(&params, cfg.x, horizon, 0.5, &mut stream(key, i as u64))?.is_extinct()))))
        .collect::<Result<_>>()?;
    let target = params.extinction_probability(cfg.x)?;
    let by_horizon = (-cfg.x * params.u_infinity(horizon)).exp();
    out.push(format!("absorbed by t={horizon}"), mean_compare(&extinct, target, (target - by_horizon).abs())?);
    Ok(out)
}

fn stationary(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let c = cfg.reflected(cfg.theta);
    let n = cfg.marginal_steps();
    let key = cfg.key("paths");
    let pairs: Vec<(f64, f64)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let p = simulate_reflected(&c, n, &mut stream(key, i as u64))?;
            Ok((*p.values().last().unwrap_or(&0.0), p.tanaka_residual()))
        })
        .collect::<Result<_>>()?;
    let (ends, residuals): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    out.push("max Tanaka residual", TestResult::moment(worst, 0.0, 0.0, 1e-9, cfg.n_paths as f64));
    out.push("KS against the stationary law", ks_test(&ends, |x| stationary_cdf(cfg.theta, cfg.a, x))?);
    let (m, se) = mean_se(&ends);
    let mut table = Table::new(&["mean", "std_error"]);
    table.rows.push(vec![m, se]);
    out.tables.insert("marginal_summary".into(), table);
    Ok(out)
}

/// One configuration per experiment kind, at the reference parameters.
pub fn verify_all_configs(n_paths: usize, dt: f64, seed: u64) -> Vec<ExperimentConfig> {
    let base = |kind| ExperimentConfig {
        n_paths,
        dt,
        seed,
        ..ExperimentConfig::new(kind)
    };
    vec![
        ExperimentConfig {
            theta: -0.5,
            a: 2.0,
            levels: vec![0.5, 1.0],
            ..base(ExperimentKind::RayKnight)
        },
        ExperimentConfig {
            theta: 0.5,
            a: 2.0,
            b: Some(1.0),
            ..base(ExperimentKind::Projection)
        },
        ExperimentConfig {
            theta: -0.5,
            gamma: 1.0,
            levels: vec![0.5],
            epsilon: Some(0.05),
            ..base(ExperimentKind::Pruning)
        },
        ExperimentConfig {
            theta: 0.5,
            ..base(ExperimentKind::Occupation)
        },
        ExperimentConfig {
            theta: 0.5,
            lambdas: vec![1.0],
            ..base(ExperimentKind::Girsanov)
        },
        ExperimentConfig {
            theta: -0.5,
            ..base(ExperimentKind::Extinction)
        },
        ExperimentConfig {
            theta: 0.5,
            ..base(ExperimentKind::Stationary)
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            n_paths: 200,
            dt: 1e-3,
            seed: 9,
            t: Some(1.0),
            ..ExperimentConfig::new(kind)
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = quick(ExperimentKind::Occupation);
        assert!(ok.validate().is_ok());
        for bad in [
            ExperimentConfig { n_paths: 99, ..ok.clone() },
            ExperimentConfig { dt: 0.0, ..ok.clone() },
            ExperimentConfig { levels: vec![0.5, 1.5], ..ok.clone() },
            ExperimentConfig { b: Some(2.0), ..ok.clone() },
            ExperimentConfig { gamma: -1.0, ..ok.clone() },
            ExperimentConfig { lambdas: vec![-1.0], ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = "kind = \"ray_knight\"\ntheta = -0.5\na = 2.0\nlevels = [0.5, 1.0]\nn_paths = 100\nseed = 3\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::RayKnight);
        assert_eq!(cfg.levels, vec![0.5, 1.0]);
        assert_eq!(cfg.dt, DEFAULT_DT);
        let again = ExperimentConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert!(ExperimentConfig::from_toml("kind = \"ray_knight\"\nthetaa = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"ray_knight\"\nn_paths = 5\n").is_err());
    }

    #[test]
    fn extinction_report() {
        let cfg = ExperimentConfig {
            theta: -0.5,
            n_paths: 2_000,
            ..quick(ExperimentKind::Extinction)
        };
        let cfg = ExperimentConfig { t: None, ..cfg };
        let r = run_experiment(&cfg).unwrap();
        assert!(r.pass, "{:?}", r.results);
        assert!((r.results[0].result.target - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn projection_onto_the_barrier_is_an_identity() {
        let cfg = ExperimentConfig {
            b: Some(1.0),
            ..quick(ExperimentKind::Projection)
        };
        let r = run_experiment(&cfg).unwrap();
        assert!(r.pass);
        assert_eq!(r.results.len(), 1);
        assert_eq!(r.results[0].result.estimate, 0.0);
    }

    #[test]
    fn reruns_are_identical_up_to_runtime() {
        let cfg = quick(ExperimentKind::Occupation);
        let strip = |mut r: ExperimentReport| {
            r.runtime_seconds = 0.0;
            serde_json::to_string(&r).unwrap()
        };
        let a = strip(run_experiment(&cfg).unwrap());
        let b = strip(run_experiment(&cfg).unwrap());
        assert_eq!(a, b);
        let other = strip(run_experiment(&ExperimentConfig { seed: 10, ..cfg }).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn every_kind_runs_and_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ExperimentKind::ALL {
            let cfg = ExperimentConfig {
                gamma: if kind == ExperimentKind::Pruning { 0.5 } else { 0.0 },
                ..quick(kind)
            };
            let r = run_experiment(&cfg).unwrap();
            assert!(!r.results.is_empty());
            let sub = dir.path().join(kind.name());
            r.write(&sub).unwrap();
            let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(sub.join("report.json")).unwrap()).unwrap();
            assert_eq!(json["schema_version"], SCHEMA_VERSION);
            assert_eq!(json["kind"], kind.name());
            for name in r.tables.keys() {
                let csv = fs::read_to_string(sub.join(format!("{name}.csv"))).unwrap();
                assert!(csv.lines().next().unwrap().contains(','));
            }
        }
    }
}

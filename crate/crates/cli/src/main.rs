use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hproc::experiment::{run_experiment, verify_all_configs, ExperimentConfig, ExperimentKind, ExperimentReport};
use hproc::pathops::stop_at_local_time;
use hproc::pruning::mark_replay;
use hproc::reflected::{simulate_reflected, ReflectedBmConfig};
use hproc::rng::path_rng;

#[derive(Parser)]
#[command(name = "hproc", version, about = "Simulate and verify height processes of quadratic branching processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write it as CSV (stopped at local time --x if given).
    Simulate(Params),
    /// Local-time field Laplace transforms of stopped paths.
    RayKnight(Params),
    /// Pruned path law, pruned field and exit local time.
    Prune(Params),
    /// Law of the projection onto a lower barrier --b.
    Project(Params),
    /// Occupation identity for g = 1 and g = r.
    Occupation(Params),
    /// Direct and reweighted estimates of the top local-time transform.
    Girsanov(Params),
    /// Extinction frequency of the exact branching chain.
    Extinction(Params),
    /// Marginal of the reflected walk against its stationary law.
    Stationary(Params),
    /// One run of every experiment at reference parameters.
    VerifyAll(Params),
}

#[derive(Args, Default)]
struct Params {
    /// Flat TOML file with experiment fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    x: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Marginal time, or horizon for extinction.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Params {
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
            None => ExperimentConfig::new(kind),
        };
        cfg.kind = kind;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(theta => theta, gamma => gamma, a => a, x => x, dt => dt, paths => n_paths, seed => seed, lambda => lambdas, levels => levels);
        if self.b.is_some() {
            cfg.b = self.b;
        }
        if self.eps.is_some() {
            cfg.epsilon = self.eps;
        }
        if self.t.is_some() {
            cfg.t = self.t;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn print_report(r: &ExperimentReport) {
    println!(
        "{} ({} paths, seed {}, {:.1}s): {}",
        r.kind.name(),
        r.config.n_paths,
        r.seed,
        r.runtime_seconds,
        if r.pass { "PASS" } else { "FAIL" }
    );
    for n in &r.results {
        let t = &n.result;
        let p = t.p_value.map(|p| format!(" p={p:.4}")).unwrap_or_default();
        println!(
            "  [{}] {}: estimate {:.6} target {:.6} tolerance {:.3e} (3se {:.3e} + bias {:.3e}){p}",
            if t.pass { "ok" } else { "FAIL" },
            n.name,
            t.estimate,
            t.target,
            t.tolerance,
            t.stat_tolerance,
            t.bias_tolerance
        );
    }
}

fn run_one(cfg: &ExperimentConfig, default_dir: &Path) -> Result<bool, String> {
    let report = run_experiment(cfg).map_err(|e| e.to_string())?;
    print_report(&report);
    let dir = cfg.out.clone().unwrap_or_else(|| default_dir.to_path_buf());
    report.write(&dir).map_err(|e| e.to_string())?;
    println!("  wrote {}", dir.join("report.json").display());
    Ok(report.pass)
}

fn simulate(p: &Params) -> Result<bool, String> {
    let cfg = p.config(ExperimentKind::Stationary)?;
    let mut rc = ReflectedBmConfig::new(cfg.theta, cfg.a, cfg.dt).map_err(|e| e.to_string())?;
    if let Some(m) = cfg.max_steps {
        rc = rc.with_max_steps(m);
    }
    let mut rng = path_rng(cfg.seed, "simulate", 0);
    let path = match p.x {
        Some(x) => stop_at_local_time(&rc, x, &mut rng),
        None => simulate_reflected(&rc, (cfg.t.unwrap_or(5.0) / cfg.dt).round() as usize, &mut rng),
    }
    .map_err(|e| e.to_string())?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("hproc-out/simulate"));
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let file = dir.join("path.csv");
    path.write_csv(BufWriter::new(File::create(&file).map_err(|e| e.to_string())?))
        .map_err(|e| e.to_string())?;
    println!(
        "{} steps, horizon {:.4}, max height {:.4}, Tanaka residual {:.2e}",
        path.steps(),
        path.horizon(),
        path.max_value(),
        path.tanaka_residual()
    );
    println!("  wrote {}", file.display());
    if cfg.gamma > 0.0 {
        let marked = mark_replay(&path, cfg.gamma, &mut rng).map_err(|e| e.to_string())?;
        let file = dir.join("marked.csv");
        marked
            .write_csv(BufWriter::new(File::create(&file).map_err(|e| e.to_string())?))
            .map_err(|e| e.to_string())?;
        println!("  kept time {:.4}; wrote {}", marked.kept_time(), file.display());
    }
    Ok(true)
}

fn verify_all(p: &Params) -> Result<bool, String> {
    let n = p.paths.unwrap_or(1_000);
    let dt = p.dt.unwrap_or(1e-3);
    let seed = p.seed.unwrap_or(0);
    let root = p.out.clone().unwrap_or_else(|| PathBuf::from("hproc-out"));
    let mut all = true;
    for cfg in verify_all_configs(n, dt, seed) {
        cfg.validate().map_err(|e| e.to_string())?;
        all &= run_one(&cfg, &root.join(cfg.kind.name()))?;
    }
    println!("{}", if all { "all experiments passed" } else { "some experiments failed" });
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let experiment = |p: &Params, kind: ExperimentKind| -> Result<bool, String> {
        let cfg = p.config(kind)?;
        run_one(&cfg, &Path::new("hproc-out").join(kind.name()))
    };
    let outcome = match &cli.command {
        Command::Simulate(p) => simulate(p),
        Command::RayKnight(p) => experiment(p, ExperimentKind::RayKnight),
        Command::Prune(p) => experiment(p, ExperimentKind::Pruning),
        Command::Project(p) => experiment(p, ExperimentKind::Projection),
        Command::Occupation(p) => experiment(p, ExperimentKind::Occupation),
        Command::Girsanov(p) => experiment(p, ExperimentKind::Girsanov),
        Command::Extinction(p) => experiment(p, ExperimentKind::Extinction),
        Command::Stationary(p) => experiment(p, ExperimentKind::Stationary),
        Command::VerifyAll(p) => verify_all(p),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use soc_core::experiment::{
    checks_to_csv, run_compare, run_particle_experiment, run_tree_experiment, run_validation, ExperimentConfig,
    ExperimentOutput, Method, Tolerance, TreeSolver,
};
use soc_core::lq::LqBenchmark;

#[derive(Parser)]
#[command(name = "soc", version, about = "Scenario-tree and particle-method convergence studies on the LQ benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Strategy MSE of scenario trees against the branching factor.
    Tree(RunArgs),
    /// Strategy MSE of the particle method against the particle count.
    Particle(RunArgs),
    /// Both studies on one benchmark, trees re-keyed by N = n_b^(T+1).
    Compare(CompareArgs),
    /// Oracle checks; exits non-zero if any fails.
    Validate(ValidateArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replications per grid value.
    #[arg(long)]
    replications: Option<usize>,
    /// Evaluation points per stage.
    #[arg(long)]
    points: Option<usize>,
    /// State dimension (1 or 2).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Tree solver.
    #[arg(long, value_parser = parse_solver)]
    solver: Option<TreeSolver>,
    /// Gradient step.
    #[arg(long)]
    step: Option<f64>,
    /// Stopping tolerance, e.g. `1e-4` or `2/N`.
    #[arg(long)]
    tol: Option<Tolerance>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated grid: branching factors or particle counts.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<u64>>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CompareArgs {
    /// TOML config of the tree study.
    #[arg(long)]
    tree_config: Option<PathBuf>,
    /// TOML config of the particle study.
    #[arg(long)]
    particle_config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tree_grid: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    particle_grid: Option<Vec<u64>>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 4)]
    horizon: usize,
}

fn parse_solver(s: &str) -> Result<TreeSolver, String> {
    match s {
        "analytic" => Ok(TreeSolver::Analytic),
        "gradient" => Ok(TreeSolver::Gradient),
        _ => Err(format!("expected `analytic` or `gradient`, got `{s}`")),
    }
}

fn load_config(path: Option<&Path>, method: Method) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::new(method));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml_str_for(&text, method).with_context(|| format!("parsing {}", path.display()))
}

fn apply(config: &mut ExperimentConfig, o: &Overrides) {
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if o.replications.is_some() {
        config.replications = o.replications;
    }
    if let Some(v) = o.points {
        config.points = v;
    }
    if let Some(v) = o.dim {
        config.dim = v;
    }
    if let Some(v) = o.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = o.horizon {
        config.horizon = v;
    }
    if let Some(v) = o.solver {
        config.solver = v;
    }
    if o.step.is_some() {
        config.step = o.step;
    }
    if o.tol.is_some() {
        config.tol = o.tol;
    }
    if o.max_iter.is_some() {
        config.max_iter = o.max_iter;
    }
}

fn emit(out: Option<&Path>, csv: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn summarize(label: &str, out: &ExperimentOutput) {
    for r in &out.reports {
        if r.excluded > 0 {
            eprintln!("{label} {}={}: {} replications excluded", r.info.param_name, r.info.param_value, r.excluded);
        }
    }
    for (t, f) in out.variance_rates.iter().enumerate() {
        eprintln!("{label} variance slope t={t}: {:.3}", f.slope);
    }
    for s in &out.skipped {
        eprintln!("{label} skipped {}: {}", s.param_value, s.reason);
    }
}

fn run(args: RunArgs, method: Method) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), method)?;
    apply(&mut config, &args.overrides);
    if args.grid.is_some() {
        config.grid = args.grid;
    }
    if args.out.is_some() {
        config.out = args.out;
    }
    let out = match method {
        Method::Tree => run_tree_experiment(&config)?,
        Method::Particle => run_particle_experiment(&config)?,
    };
    summarize(method.name(), &out);
    emit(out.config.out.as_deref(), &out.to_csv())
}

fn compare(args: CompareArgs) -> Result<()> {
    let mut tree = load_config(args.tree_config.as_deref(), Method::Tree)?;
    let mut particle = load_config(args.particle_config.as_deref(), Method::Particle)?;
    apply(&mut tree, &args.overrides);
    apply(&mut particle, &args.overrides);
    if args.tree_grid.is_some() {
        tree.grid = args.tree_grid;
    }
    if args.particle_grid.is_some() {
        particle.grid = args.particle_grid;
    }
    let out = run_compare(&tree, &particle)?;
    summarize("tree", &out.tree);
    summarize("particle", &out.particle);
    for (t, f) in out.tree_rates_by_scenarios.iter().enumerate() {
        eprintln!("tree variance slope vs N t={t}: {:.3}", f.slope);
    }
    emit(args.out.as_deref(), &out.to_csv())
}

fn validate(args: ValidateArgs) -> Result<bool> {
    let bench = LqBenchmark::new(args.horizon, args.epsilon, args.dim)?;
    let checks = run_validation(bench, args.seed)?;
    for c in &checks {
        eprintln!(
            "{} {:<36} value = {:e} (tolerance {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    emit(args.out.as_deref(), &checks_to_csv(&checks))?;
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tree(a) => run(a, Method::Tree).map(|_| true),
        Command::Particle(a) => run(a, Method::Particle).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

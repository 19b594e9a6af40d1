//! Convergence studies on the linear-quadratic benchmark: tree and particle
//! sweeps over a size grid, head-to-head comparison, and the oracle suite.
//!
//! Configs are flat TOML tables (see [`ExperimentConfig`]); every CSV starts
//! with the fully resolved config echoed as `# key = value` lines.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{fit_rate, gen_eval_points, mse_evaluate, simulation_indicator, EvalPointSet, MethodInfo, MseReport, PointMode, RateFit, Replica};
use crate::lq::{lq_grid_dp, lq_optimal_policy, lq_problem, LqBenchmark, LqProblem, UniformGrid};
use crate::noise::sample_scenarios;
use crate::particle::{
    backward_pass, forward_pass, gradient_pass, particle_policy, particle_solve, ParticleSolveConfig, SolveStatus,
};
use crate::policy::FeedbackPolicy;
use crate::problem::{check_derivatives, ProbePoint};
use crate::regression::{NearestNeighbor, NearestNeighborMap};
use crate::seed::{Purpose, SeedPlan};
use crate::tree::{
    build_tree_with_budget, solve_tree_gradient, solve_tree_lq_analytic, tree_node_count, tree_policy, TreeGradientConfig,
    DEFAULT_NODE_BUDGET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tree,
    Particle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tree => "tree",
            Method::Particle => "particle",
        }
    }

    pub fn param_name(self) -> &'static str {
        match self {
            Method::Tree => "n_b",
            Method::Particle => "N",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeSolver {
    #[default]
    Analytic,
    Gradient,
}

/// Stopping tolerance, either absolute (`"1e-4"`) or inversely proportional
/// to the scenario count (`"2/N"`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Tolerance {
    Absolute(f64),
    PerScenario(f64),
}

impl Tolerance {
    pub fn resolve(self, scenarios: u64) -> f64 {
        match self {
            Tolerance::Absolute(t) => t,
            Tolerance::PerScenario(c) => c / scenarios as f64,
        }
    }
}

impl FromStr for Tolerance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (num, per) = match s.strip_suffix("/N") {
            Some(head) => (head.trim(), true),
            None => (s, false),
        };
        let v: f64 = num
            .parse()
            .map_err(|_| Error::Config(format!("tolerance must look like `1e-4` or `2/N`, got `{s}`")))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("tolerance must be > 0, got `{s}`")));
        }
        Ok(if per { Tolerance::PerScenario(v) } else { Tolerance::Absolute(v) })
    }
}

impl TryFrom<String> for Tolerance {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Tolerance> for String {
    fn from(t: Tolerance) -> String {
        t.to_string()
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::Absolute(v) => write!(f, "{v:e}"),
            Tolerance::PerScenario(c) => write!(f, "{c}/N"),
        }
    }
}

/// One convergence study. Unset optional fields take method-dependent
/// defaults in [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub horizon: usize,
    pub epsilon: f64,
    pub dim: usize,
    /// Branching factors (tree) or particle counts (particle).
    pub grid: Option<Vec<u64>>,
    /// Defaults to 1000 (tree) or 100 (particle).
    pub replications: Option<usize>,
    pub points: usize,
    pub point_mode: PointMode,
    pub seed: u64,
    /// Tree solver; the gradient solver also uses `step`, `tol`, `max_iter`.
    pub solver: TreeSolver,
    pub step: Option<f64>,
    pub tol: Option<Tolerance>,
    pub max_iter: Option<usize>,
    pub node_budget: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Tree,
            horizon: 4,
            epsilon: 1.0,
            dim: 1,
            grid: None,
            replications: None,
            points: 1000,
            point_mode: PointMode::Qmc,
            seed: 20240601,
            solver: TreeSolver::Analytic,
            step: None,
            tol: None,
            max_iter: None,
            node_budget: DEFAULT_NODE_BUDGET,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Resolved replication count.
    pub fn replications(&self) -> usize {
        self.replications.unwrap_or(match self.method {
            Method::Tree => 1000,
            Method::Particle => 100,
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config for `method`; a file without a `method` key is taken
    /// to be for `method`, a file naming another method is rejected.
    pub fn from_toml_str_for(s: &str, method: Method) -> Result<Self> {
        let mut table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        table
            .entry("method")
            .or_insert_with(|| toml::Value::String(method.name().into()));
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if config.method != method {
            return Err(Error::Config(format!("config is for method `{}`, expected `{}`", config.method.name(), method.name())));
        }
        Ok(config)
    }

    pub fn benchmark(&self) -> LqBenchmark {
        LqBenchmark {
            horizon: self.horizon,
            epsilon: self.epsilon,
            dim: self.dim,
        }
    }

    /// Fills every optional field with its default and validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let grid = match c.method {
            Method::Tree => vec![2, 3, 4, 5, 6, 8],
            Method::Particle => vec![27, 81, 243, 729],
        };
        c.grid.get_or_insert(grid);
        c.replications = Some(c.replications());
        match c.method {
            Method::Particle => {
                c.step.get_or_insert(0.1 / (1.0 + c.epsilon));
                c.tol.get_or_insert(Tolerance::PerScenario(2.0));
                c.max_iter.get_or_insert(2000);
            }
            Method::Tree if c.solver == TreeSolver::Gradient => {
                let d = TreeGradientConfig::for_lq(c.horizon, c.epsilon);
                c.step.get_or_insert(d.step);
                c.tol.get_or_insert(Tolerance::Absolute(d.tol));
                c.max_iter.get_or_insert(d.max_iter);
            }
            Method::Tree => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark().validate()?;
        let grid = self.grid.as_deref().unwrap_or(&[]);
        if grid.is_empty() {
            return Err(Error::Config("grid must not be empty".into()));
        }
        if grid.contains(&0) {
            return Err(Error::Config(format!("{} values must be >= 1", self.method.param_name())));
        }
        if self.replications() < 2 {
            return Err(Error::Config("replications must be >= 2".into()));
        }
        if self.points == 0 {
            return Err(Error::Config("points must be >= 1".into()));
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step must be > 0, got {s}")));
            }
        }
        if self.max_iter == Some(0) {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// The config as `# key = value` lines.
    pub fn echo(&self, prefix: &str) -> String {
        let body = toml::to_string(self).unwrap_or_default();
        let mut s = String::new();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(s, "# {prefix}{line}");
        }
        s
    }
}

/// A grid value that was not run.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub param_value: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    /// Resolved config.
    pub config: ExperimentConfig,
    /// One report per grid value that ran, in grid order.
    pub reports: Vec<MseReport>,
    /// Variance against grid value, one fit per stage (empty with fewer than
    /// three usable grid values).
    pub variance_rates: Vec<RateFit>,
    pub skipped: Vec<Skipped>,
}

pub const CSV_HEADER: &str = "method,param_name,param_value,t,bias_sq,variance,mse,R,P,excluded,seed";

fn report_rows(reports: &[&MseReport]) -> Vec<(String, u64, usize, String)> {
    let mut rows = Vec::new();
    for r in reports {
        for t in 0..r.mse.len() {
            let line = format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.info.method,
                r.info.param_name,
                r.info.param_value,
                t,
                r.squared_bias[t],
                r.variance[t],
                r.mse[t],
                r.replications,
                r.points,
                r.excluded,
                r.seed
            );
            rows.push((r.info.method.clone(), r.info.param_value, t, line));
        }
    }
    rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
    rows
}

fn rate_footer(s: &mut String, label: &str, rates: &[RateFit]) {
    for (t, f) in rates.iter().enumerate() {
        let _ = writeln!(
            s,
            "# {label} variance rate t={t}: slope = {}, intercept = {}, residual = {}",
            f.slope, f.intercept, f.residual
        );
    }
}

impl ExperimentOutput {
    /// Config echo, then the tidy report rows sorted by
    /// `(method, param_value, t)`, then fitted rates and skipped grid values.
    pub fn to_csv(&self) -> String {
        let mut s = self.config.echo("");
        s.push_str(CSV_HEADER);
        s.push('\n');
        let reports: Vec<&MseReport> = self.reports.iter().collect();
        for (_, _, _, line) in report_rows(&reports) {
            s.push_str(&line);
            s.push('\n');
        }
        rate_footer(&mut s, self.config.method.param_name(), &self.variance_rates);
        for k in &self.skipped {
            let _ = writeln!(s, "# skipped {}={}: {}", self.config.method.param_name(), k.param_value, k.reason);
        }
        s
    }
}

/// Stream key for replication `r` at grid value `param`.
fn replication_key(param: u64, r: usize) -> u64 {
    (param << 32) ^ r as u64
}

fn eval_points(config: &ExperimentConfig, problem: &LqProblem) -> Result<EvalPointSet> {
    let optimal = lq_optimal_policy(config.benchmark())?;
    let mut stream = SeedPlan::new(config.seed).stream(Purpose::EvalPoints, 0);
    gen_eval_points(problem, &optimal, config.points, config.point_mode, &mut stream)
}

fn variance_rates(reports: &[MseReport], horizon: usize) -> Result<Vec<RateFit>> {
    if reports.len() < 3 {
        return Ok(Vec::new());
    }
    let sizes: Vec<f64> = reports.iter().map(|r| r.info.param_value as f64).collect();
    (0..horizon)
        .map(|t| {
            let errors: Vec<f64> = reports.iter().map(|r| r.variance[t]).collect();
            fit_rate(&sizes, &errors)
        })
        .collect()
}

/// For each branching factor: `R` independent trees, solved and turned into
/// nearest-neighbour strategies, scored by [`mse_evaluate`]. Grid values
/// whose tree exceeds the node budget are skipped.
pub fn run_tree_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let config = ExperimentConfig {
        method: Method::Tree,
        ..config.clone()
    }
    .resolved()?;
    let bench = config.benchmark();
    let problem = lq_problem(bench)?;
    let optimal = lq_optimal_policy(bench)?;
    let points = eval_points(&config, &problem)?;
    let plan = SeedPlan::new(config.seed);
    let defaults = TreeGradientConfig::for_lq(bench.horizon, bench.epsilon);
    let gradient = TreeGradientConfig {
        step: config.step.unwrap_or(defaults.step),
        tol: config.tol.map_or(defaults.tol, |t| t.resolve(1)),
        max_iter: config.max_iter.unwrap_or(defaults.max_iter),
        initial_controls: None,
    };

    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for &nb in config.grid.as_deref().unwrap_or(&[]) {
        let nodes = tree_node_count(nb as usize, bench.horizon);
        if nodes.is_none_or(|n| n > config.node_budget as u128) {
            skipped.push(Skipped {
                param_value: nb,
                reason: format!(
                    "tree needs {} nodes, budget is {}",
                    nodes.map_or("more than 2^128".to_string(), |n| n.to_string()),
                    config.node_budget
                ),
            });
            continue;
        }
        let make = |r: usize| {
            let mut stream = plan.stream(Purpose::Tree, replication_key(nb, r));
            let tree = build_tree_with_budget(&problem, nb as usize, &mut stream, config.node_budget)?;
            let solution = match config.solver {
                TreeSolver::Analytic => solve_tree_lq_analytic(&tree, bench.epsilon)?,
                TreeSolver::Gradient => solve_tree_gradient(&problem, &tree, &gradient)?,
            };
            if !solution.converged {
                return Ok(Replica::Excluded(format!("gradient norm {} after {} iterations", solution.grad_norm, solution.iterations)));
            }
            Ok(Replica::Ready(tree_policy(&tree, &solution, bench.dim, bench.dim)?))
        };
        let mut report = mse_evaluate(make, &optimal, &points, config.replications())?;
        report.info = MethodInfo {
            method: "tree".into(),
            param_name: "n_b".into(),
            param_value: nb,
        };
        report.seed = config.seed;
        reports.push(report);
    }
    let variance_rates = variance_rates(&reports, bench.horizon)?;
    Ok(ExperimentOutput {
        config,
        reports,
        variance_rates,
        skipped,
    })
}

/// Solver settings of a particle experiment at particle count `n`.
pub fn particle_solve_config(config: &ExperimentConfig, n: u64) -> ParticleSolveConfig {
    let mut c = ParticleSolveConfig::for_lq(config.epsilon, config.dim);
    if let Some(s) = config.step {
        c.step = s;
    }
    if let Some(t) = config.tol {
        c.tol = t.resolve(n);
    }
    if let Some(m) = config.max_iter {
        c.max_iter = m;
    }
    c
}

/// For each particle count: `R` independent particle solves scored by
/// [`mse_evaluate`]. Solves that stop without meeting the tolerance are
/// excluded and counted.
pub fn run_particle_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let config = ExperimentConfig {
        method: Method::Particle,
        ..config.clone()
    }
    .resolved()?;
    let bench = config.benchmark();
    let problem = lq_problem(bench)?;
    let optimal = lq_optimal_policy(bench)?;
    let points = eval_points(&config, &problem)?;
    let plan = SeedPlan::new(config.seed);

    let mut reports = Vec::new();
    for &n in config.grid.as_deref().unwrap_or(&[]) {
        let solve = particle_solve_config(&config, n);
        let make = |r: usize| {
            let mut stream = plan.stream(Purpose::Particles, replication_key(n, r));
            let scenarios = sample_scenarios(&problem, n as usize, &mut stream)?;
            let system = particle_solve(&problem, scenarios, &solve, &NearestNeighbor)?;
            if system.status != SolveStatus::Converged {
                return Ok(Replica::Excluded(format!(
                    "{:?} after {} iterations, max gradient norm {}",
                    system.status,
                    system.iterations,
                    system.final_grad_norm()
                )));
            }
            Ok(Replica::Ready(particle_policy(&problem, &system)?))
        };
        let mut report = mse_evaluate(make, &optimal, &points, config.replications())?;
        report.info = MethodInfo {
            method: "particle".into(),
            param_name: "N".into(),
            param_value: n,
        };
        report.seed = config.seed;
        reports.push(report);
    }
    let variance_rates = variance_rates(&reports, bench.horizon)?;
    Ok(ExperimentOutput {
        config,
        reports,
        variance_rates,
        skipped: Vec::new(),
    })
}

/// Tree and particle studies on one benchmark, with tree reports re-keyed by
/// total scenario count `N = n_b^(T+1)`.
#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub tree: ExperimentOutput,
    pub particle: ExperimentOutput,
    /// Tree reports with `param_name = "N"`.
    pub tree_by_scenarios: Vec<MseReport>,
    /// Tree variance against `N`, one fit per stage.
    pub tree_rates_by_scenarios: Vec<RateFit>,
}

pub fn run_compare(tree: &ExperimentConfig, particle: &ExperimentConfig) -> Result<CompareOutput> {
    if tree.benchmark() != particle.benchmark() {
        return Err(Error::Config(format!(
            "benchmarks differ: tree {:?}, particle {:?}",
            tree.benchmark(),
            particle.benchmark()
        )));
    }
    let tree = run_tree_experiment(tree)?;
    let particle = run_particle_experiment(particle)?;
    let horizon = tree.config.horizon;
    let tree_by_scenarios: Vec<MseReport> = tree
        .reports
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.info.param_name = "N".into();
            r.info.param_value = (r.info.param_value as u128)
                .checked_pow(horizon as u32 + 1)
                .and_then(|v| u64::try_from(v).ok())
                .unwrap_or(u64::MAX);
            r
        })
        .collect();
    let tree_rates_by_scenarios = variance_rates(&tree_by_scenarios, horizon)?;
    Ok(CompareOutput {
        tree,
        particle,
        tree_by_scenarios,
        tree_rates_by_scenarios,
    })
}

impl CompareOutput {
    pub fn to_csv(&self) -> String {
        let mut s = self.tree.config.echo("tree.");
        s.push_str(&self.particle.config.echo("particle."));
        s.push_str(CSV_HEADER);
        s.push('\n');
        let reports: Vec<&MseReport> = self.tree_by_scenarios.iter().chain(&self.particle.reports).collect();
        for (_, _, _, line) in report_rows(&reports) {
            s.push_str(&line);
            s.push('\n');
        }
        rate_footer(&mut s, "tree N", &self.tree_rates_by_scenarios);
        rate_footer(&mut s, "particle N", &self.particle.variance_rates);
        for k in &self.tree.skipped {
            let _ = writeln!(s, "# skipped tree n_b={}: {}", k.param_value, k.reason);
        }
        s
    }
}

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

pub fn checks_to_csv(checks: &[Check]) -> String {
    let mut s = String::from("check,value,tolerance,passed\n");
    for c in checks {
        let _ = writeln!(s, "{},{},{},{}", c.name, c.value, c.tolerance, c.passed);
    }
    s
}

/// Sup-norm gap on `[-2, 2]` between the closed-form strategy and the grid
/// value-iteration oracle (state step 0.01, control step 0.01, 64 quadrature
/// nodes). 1-D benchmarks only.
pub fn closed_form_vs_grid_dp(bench: LqBenchmark) -> Result<f64> {
    let reach = 2.0 + 2.0 * bench.horizon as f64;
    let dp = lq_grid_dp(bench, UniformGrid::symmetric(reach, 0.01)?, UniformGrid::symmetric(3.0, 0.01)?, 64)?;
    let optimal = lq_optimal_policy(bench)?;
    let xs = UniformGrid::symmetric(2.0, 0.005)?.points();
    let mut gap: f64 = 0.0;
    for t in 0..bench.horizon {
        for &x in &xs {
            let a = dp.eval(t, &[x])?[0];
            let b = optimal.eval(t, &[x])?[0];
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

/// Largest per-node control gap between the gradient and closed-form tree
/// solvers over `trees` seeded trees.
pub fn tree_solver_gap(bench: LqBenchmark, branching: usize, trees: usize, seed: u64) -> Result<f64> {
    let problem = lq_problem(bench)?;
    let plan = SeedPlan::new(seed);
    let mut gap: f64 = 0.0;
    for r in 0..trees {
        let tree = build_tree_with_budget(&problem, branching, &mut plan.stream(Purpose::Tree, r as u64), DEFAULT_NODE_BUDGET)?;
        let exact = solve_tree_lq_analytic(&tree, bench.epsilon)?;
        let grad = solve_tree_gradient(&problem, &tree, &TreeGradientConfig::for_lq(bench.horizon, bench.epsilon))?;
        if !grad.converged {
            return Err(Error::InvalidArgument(format!("tree gradient solver did not converge on tree {r}")));
        }
        for (a, b) in exact.controls.iter().zip(&grad.controls) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

/// Largest gap between indexed and exhaustive nearest-center search.
fn nearest_neighbor_gap<R: Rng>(dim: usize, centers: usize, queries: usize, rng: &mut R) -> Result<f64> {
    let c: Vec<f64> = (0..centers * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let map = NearestNeighborMap::new(c, vec![0.0; centers], dim, 1)?;
    let mismatches = (0..queries)
        .filter(|_| {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
            map.nearest(&q) != map.nearest_exhaustive(&q)
        })
        .count();
    Ok(mismatches as f64)
}

/// Largest residual of the forward recursion, the terminal adjoint condition
/// and the benchmark's adjoint/gradient formulas on a random particle system.
fn particle_recursion_gap(bench: LqBenchmark, n: usize, seed: u64) -> Result<f64> {
    let problem = lq_problem(bench)?;
    let plan = SeedPlan::new(seed);
    let scenarios = sample_scenarios(&problem, n, &mut plan.stream(Purpose::Particles, 0))?;
    let mut rng = plan.stream(Purpose::Custom(1), 0);
    let d = bench.dim;
    let horizon = bench.horizon;
    let controls: Vec<f64> = (0..n * horizon * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let states = forward_pass(&problem, &controls, &scenarios)?;
    let adjoints = backward_pass(&problem, &states, &controls, &scenarios, &NearestNeighbor)?;
    let grads = gradient_pass(&problem, &states, &controls, &scenarios, &adjoints, &NearestNeighbor)?;
    let x = |i: usize, t: usize| &states[(i * (horizon + 1) + t) * d..(i * (horizon + 1) + t + 1) * d];
    let lam = |i: usize, t: usize| &adjoints[(i * (horizon + 1) + t) * d..(i * (horizon + 1) + t + 1) * d];
    let u = |i: usize, t: usize| &controls[(i * horizon + t) * d..(i * horizon + t + 1) * d];
    let g = |i: usize, t: usize| &grads[(i * horizon + t) * d..(i * horizon + t + 1) * d];
    let mut gap: f64 = 0.0;
    for i in 0..n {
        for k in 0..d {
            gap = gap.max((x(i, 0)[k] - scenarios.noise(i, 0)[k]).abs());
            gap = gap.max((lam(i, horizon)[k] - 2.0 * x(i, horizon)[k]).abs());
        }
    }
    for t in 0..horizon {
        let centers: Vec<f64> = (0..n).flat_map(|j| x(j, t + 1).to_vec()).collect();
        let values: Vec<f64> = (0..n).flat_map(|j| lam(j, t + 1).to_vec()).collect();
        let next = NearestNeighborMap::new(centers, values, d, d)?;
        for i in 0..n {
            let mut sum = vec![0.0; d];
            for j in 0..n {
                let q: Vec<f64> = (0..d).map(|k| x(i, t)[k] + u(i, t)[k] + scenarios.noise(j, t + 1)[k]).collect();
                let v = next.value(next.nearest_exhaustive(&q));
                for k in 0..d {
                    sum[k] += v[k];
                }
            }
            for k in 0..d {
                let step = x(i, t)[k] + u(i, t)[k] + scenarios.noise(i, t + 1)[k];
                gap = gap.max((x(i, t + 1)[k] - step).abs());
                let mean = sum[k] / n as f64;
                gap = gap.max((lam(i, t)[k] - mean).abs() / mean.abs().max(1.0));
                let want = 2.0 * bench.epsilon * u(i, t)[k] + mean;
                gap = gap.max((g(i, t)[k] - want).abs() / want.abs().max(1.0));
            }
        }
    }
    Ok(gap)
}

/// Oracle suite on the benchmark: closed form against value iteration, tree
/// solver cross-check, derivative consistency, simulation indicator of the
/// optimum, nearest-neighbour search, particle recursions and the MSE
/// decomposition identity.
pub fn run_validation(bench: LqBenchmark, seed: u64) -> Result<Vec<Check>> {
    bench.validate()?;
    let problem = lq_problem(bench)?;
    let optimal = lq_optimal_policy(bench)?;
    let plan = SeedPlan::new(seed);
    let mut checks = Vec::new();

    if bench.dim == 1 {
        checks.push(Check::at_most("closed_form_vs_grid_dp", closed_form_vs_grid_dp(bench)?, 2e-3));
    }
    let small = LqBenchmark { horizon: 3, ..bench };
    checks.push(Check::at_most("tree_gradient_vs_analytic", tree_solver_gap(small, 2, 20, seed)?, 1e-6));

    let mut rng = plan.stream(Purpose::Custom(2), 0);
    let d = bench.dim;
    let probes: Vec<ProbePoint> = (0..20)
        .map(|k| ProbePoint {
            t: k % bench.horizon,
            x: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            u: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            w: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let report = check_derivatives(&problem, &probes, 1e-5)?;
    checks.push(Check::at_most("derivatives_vs_central_differences", report.max_abs(), 1e-6));

    let sim = simulation_indicator(&optimal, &optimal, &problem, 1000, &mut plan.stream(Purpose::Simulation, 0))?;
    checks.push(Check::at_most("simulation_indicator_of_optimum", sim, 0.0));

    let mut rng = plan.stream(Purpose::Custom(3), 0);
    checks.push(Check::at_most("nearest_neighbor_mismatches_1d", nearest_neighbor_gap(1, 500, 1000, &mut rng)?, 0.0));
    checks.push(Check::at_most("nearest_neighbor_mismatches_2d", nearest_neighbor_gap(2, 500, 1000, &mut rng)?, 0.0));

    checks.push(Check::at_most("particle_recursion_residual", particle_recursion_gap(bench, 40, seed)?, 1e-12));

    let config = ExperimentConfig {
        horizon: bench.horizon,
        epsilon: bench.epsilon,
        dim: bench.dim,
        grid: Some(vec![2, 3]),
        replications: Some(20),
        points: 200,
        seed,
        ..ExperimentConfig::new(Method::Tree)
    };
    let out = run_tree_experiment(&config)?;
    let identity = out
        .reports
        .iter()
        .flat_map(|r| (0..r.mse.len()).map(move |t| (r.mse[t] - r.squared_bias[t] - r.variance[t]).abs() / r.mse[t].max(1e-300)))
        .fold(0.0, f64::max);
    checks.push(Check::at_most("mse_decomposition_identity", identity, 4.0 * f64::EPSILON));
    let direct = out
        .reports
        .iter()
        .flat_map(|r| (0..r.mse.len()).map(move |t| (r.mse[t] - r.direct_mse[t]).abs() / r.mse[t].max(1e-300)))
        .fold(0.0, f64::max);
    checks.push(Check::at_most("mse_matches_direct_average", direct, 1e-10));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_round_trips() {
        for s in ["2/N", "0.5/N", "1e-4"] {
            let t: Tolerance = s.parse().unwrap();
            assert_eq!(t.to_string().parse::<Tolerance>().unwrap(), t);
        }
        assert_eq!("2/N".parse::<Tolerance>().unwrap().resolve(8), 0.25);
        assert_eq!("1e-4".parse::<Tolerance>().unwrap().resolve(8), 1e-4);
        assert!("-1/N".parse::<Tolerance>().is_err());
        assert!("abc".parse::<Tolerance>().is_err());
    }

    #[test]
    fn config_defaults_by_method() {
        let t = ExperimentConfig::new(Method::Tree).resolved().unwrap();
        assert_eq!(t.grid.as_deref(), Some(&[2, 3, 4, 5, 6, 8][..]));
        assert_eq!(t.step, None);
        let p = ExperimentConfig::new(Method::Particle).resolved().unwrap();
        assert_eq!(p.grid.as_deref(), Some(&[27, 81, 243, 729][..]));
        assert_eq!(p.step, Some(0.05));
        assert_eq!(p.tol, Some(Tolerance::PerScenario(2.0)));
        assert_eq!(p.replications, Some(100));
    }

    #[test]
    fn config_parses_flat_toml_and_echoes() {
        let c = ExperimentConfig::from_toml_str(
            "method = \"particle\"\nhorizon = 3\ngrid = [4, 8]\ntol = \"1/N\"\npoint_mode = \"pseudo-random\"\n",
        )
        .unwrap();
        assert_eq!(c.method, Method::Particle);
        assert_eq!(c.horizon, 3);
        assert_eq!(c.tol, Some(Tolerance::PerScenario(1.0)));
        let echo = c.resolved().unwrap().echo("");
        assert!(echo.lines().all(|l| l.starts_with("# ")));
        assert!(echo.contains("# tol = \"1/N\""));
        let back: String = echo.lines().map(|l| format!("{}\n", &l[2..])).collect();
        assert_eq!(ExperimentConfig::from_toml_str(&back).unwrap(), c.resolved().unwrap());
    }

    #[test]
    fn config_method_defaults_to_the_caller() {
        let c = ExperimentConfig::from_toml_str_for("grid = [5]", Method::Particle).unwrap();
        assert_eq!(c.method, Method::Particle);
        assert!(ExperimentConfig::from_toml_str_for("method = \"tree\"", Method::Particle).is_err());
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let mut c = ExperimentConfig::new(Method::Tree);
        c.replications = Some(1);
        assert!(c.resolved().is_err());
        c.replications = Some(2);
        c.grid = Some(vec![]);
        assert!(c.resolved().is_err());
        c.grid = Some(vec![0]);
        assert!(c.resolved().is_err());
        c.grid = Some(vec![2]);
        c.dim = 3;
        assert!(c.resolved().is_err());
    }

    #[test]
    fn over_budget_grid_points_are_skipped() {
        let c = ExperimentConfig {
            grid: Some(vec![2, 50]),
            replications: Some(2),
            points: 5,
            node_budget: 10_000,
            ..ExperimentConfig::new(Method::Tree)
        };
        let out = run_tree_experiment(&c).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].param_value, 50);
        assert!(out.to_csv().contains("# skipped n_b=50"));
    }

    #[test]
    fn tree_smoke_run_satisfies_identity() {
        let c = ExperimentConfig {
            grid: Some(vec![1]),
            replications: Some(2),
            points: 1,
            ..ExperimentConfig::new(Method::Tree)
        };
        let out = run_tree_experiment(&c).unwrap();
        let r = &out.reports[0];
        for t in 0..4 {
            assert_eq!(r.mse[t], r.squared_bias[t] + r.variance[t]);
        }
        assert!(out.variance_rates.is_empty());
    }

    #[test]
    fn compare_rejects_mismatched_benchmarks() {
        let t = ExperimentConfig::new(Method::Tree);
        let p = ExperimentConfig {
            epsilon: 2.0,
            ..ExperimentConfig::new(Method::Particle)
        };
        assert!(matches!(run_compare(&t, &p), Err(Error::Config(_))));
    }

    #[test]
    fn compare_rekeys_trees_by_scenario_count() {
        let t = ExperimentConfig {
            grid: Some(vec![2, 3]),
            replications: Some(3),
            points: 10,
            ..ExperimentConfig::new(Method::Tree)
        };
        let p = ExperimentConfig {
            grid: Some(vec![5]),
            replications: Some(3),
            points: 10,
            ..ExperimentConfig::new(Method::Particle)
        };
        let out = run_compare(&t, &p).unwrap();
        let keys: Vec<u64> = out.tree_by_scenarios.iter().map(|r| r.info.param_value).collect();
        assert_eq!(keys, vec![32, 243]);
        let csv = out.to_csv();
        assert!(csv.contains("\ntree,N,243,0,"));
        assert!(csv.contains("\nparticle,N,5,0,"));
    }
}

//! Acceptance run on the LQ benchmark (T = 4, ε = 1): prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use soc_core::evaluation::{gen_eval_points, mse_evaluate, MseReport, PointMode, RateFit, Replica};
use soc_core::experiment::{
    closed_form_vs_grid_dp, run_compare, run_particle_experiment, run_tree_experiment, run_validation, tree_solver_gap, ExperimentConfig,
    ExperimentOutput, Method,
};
use soc_core::lq::{lq_optimal_policy, lq_problem, LqBenchmark, LqOptimalPolicy};
use soc_core::policy::{FeedbackPolicy, PolicyKind};
use soc_core::{Purpose, SeedPlan};

struct Outcome {
    passed: Vec<bool>,
}

impl Outcome {
    fn line(&mut self, id: &str, passed: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.passed.push(passed);
    }
}

fn slopes(rates: &[RateFit]) -> String {
    rates.iter().enumerate().map(|(t, f)| format!("t{t}={:.3}", f.slope)).collect::<Vec<_>>().join(" ")
}

fn all_slopes_in(rates: &[RateFit], lo: f64, hi: f64) -> bool {
    !rates.is_empty() && rates.iter().all(|f| (lo..=hi).contains(&f.slope))
}

fn report_at(out: &ExperimentOutput, value: u64) -> &MseReport {
    out.reports.iter().find(|r| r.info.param_value == value).expect("grid value ran")
}

fn excluded(out: &ExperimentOutput) -> usize {
    out.reports.iter().map(|r| r.excluded).sum()
}

/// `γ* + offset`.
struct Shifted {
    optimal: LqOptimalPolicy,
    offset: f64,
}

impl FeedbackPolicy for Shifted {
    fn horizon(&self) -> usize {
        self.optimal.horizon()
    }
    fn state_dim(&self) -> usize {
        self.optimal.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.optimal.control_dim()
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::ClosedForm
    }
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]) {
        self.optimal.evaluate(t, x, out);
        out.iter_mut().for_each(|u| *u += self.offset);
    }
}

/// Largest deviation of the recovered `(b², v)` in units of its standard error.
fn synthetic_recovery(bench: LqBenchmark) -> f64 {
    let problem = lq_problem(bench).unwrap();
    let optimal = lq_optimal_policy(bench).unwrap();
    let plan = SeedPlan::new(99);
    let pts = gen_eval_points(&problem, &optimal, 200, PointMode::Qmc, &mut plan.stream(Purpose::EvalPoints, 0)).unwrap();
    let (bias, var, reps) = (0.25, 0.09, 5000usize);
    let half = (3.0 * var as f64).sqrt();
    let report = mse_evaluate(
        |r| {
            let z: f64 = plan.stream(Purpose::Custom(7), r as u64).random_range(-half..half);
            Ok(Replica::Ready(Shifted { optimal, offset: bias + z }))
        },
        &optimal,
        &pts,
        reps,
    )
    .unwrap();
    let n = reps as f64;
    let se_bias = (4.0 * bias * bias * var / n).sqrt();
    let se_var = (0.8 * var * var / n).sqrt();
    (0..bench.horizon)
        .map(|t| {
            let zb = (report.squared_bias[t] - bias * bias).abs() / se_bias;
            let zv = (report.variance[t] - var).abs() / se_var;
            zb.max(zv)
        })
        .fold(0.0, f64::max)
}

fn main() -> ExitCode {
    let start = Instant::now();
    let bench = LqBenchmark::new(4, 1.0, 1).unwrap();
    let mut o = Outcome { passed: Vec::new() };

    let gap = closed_form_vs_grid_dp(bench).unwrap();
    o.line("1", gap <= 2e-3, format!("closed form vs grid DP sup-gap {gap:.3e} (<= 2e-3)"));

    let gap = tree_solver_gap(LqBenchmark { horizon: 3, ..bench }, 2, 20, 1).unwrap();
    o.line("2", gap <= 1e-6, format!("tree gradient vs analytic max control gap {gap:.3e} (<= 1e-6)"));

    let tree = ExperimentConfig::new(Method::Tree);
    let particle = ExperimentConfig::new(Method::Particle);
    let compare = run_compare(&tree, &particle).unwrap();
    let (trees, particles) = (&compare.tree, &compare.particle);

    let dominated = trees.reports.iter().all(|r| (0..4).all(|t| r.variance[t] > r.squared_bias[t]));
    o.line(
        "3",
        all_slopes_in(&trees.variance_rates, -1.3, -0.7) && dominated,
        format!(
            "tree variance slope vs n_b {} in [-1.3, -0.7]; variance > bias^2 everywhere: {dominated}",
            slopes(&trees.variance_rates)
        ),
    );

    o.line(
        "4",
        all_slopes_in(&compare.tree_rates_by_scenarios, -0.30, -0.12),
        format!("tree variance slope vs N = n_b^5 {} in [-0.30, -0.12]", slopes(&compare.tree_rates_by_scenarios)),
    );

    let dominated = particles.reports.iter().all(|r| (0..4).all(|t| r.variance[t] > r.squared_bias[t]));
    o.line(
        "5",
        all_slopes_in(&particles.variance_rates, -1.2, -0.6) && dominated,
        format!(
            "particle d=1 variance slope vs N {} in [-1.2, -0.6]; variance > bias^2 everywhere: {dominated}; excluded {}",
            slopes(&particles.variance_rates),
            excluded(particles)
        ),
    );

    let p243 = report_at(particles, 243);
    let (lo, hi) = p243.mse.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    o.line("6", hi / lo <= 3.0, format!("particle d=1 N=243 max/min stage MSE {:.3} (<= 3)", hi / lo));

    let t0 = Instant::now();
    let two = run_particle_experiment(&ExperimentConfig {
        dim: 2,
        ..ExperimentConfig::new(Method::Particle)
    })
    .unwrap();
    let p729 = report_at(&two, 729);
    let bias_wins = (0..4).all(|t| p729.squared_bias[t] >= p729.variance[t]);
    o.line(
        "7",
        all_slopes_in(&two.variance_rates, -0.75, -0.30) && bias_wins,
        format!(
            "particle d=2 variance slope vs N {} in [-0.75, -0.30]; bias^2 >= variance at N=729: {bias_wins}; excluded {} ({:.0}s)",
            slopes(&two.variance_rates),
            excluded(&two),
            t0.elapsed().as_secs_f64()
        ),
    );

    let t243 = compare.tree_by_scenarios.iter().find(|r| r.info.param_value == 243).expect("n_b = 3 ran");
    let better = (0..4).all(|t| p243.mse[t] < t243.mse[t]);
    let ratios: Vec<String> = (0..4).map(|t| format!("{:.2e}", p243.mse[t] / t243.mse[t])).collect();
    o.line("8", better, format!("N=243 d=1 particle/tree MSE per stage [{}] (< 1)", ratios.join(", ")));

    // property suite
    let mut failures = Vec::new();
    for dim in [1, 2] {
        for c in run_validation(LqBenchmark::new(4, 1.0, dim).unwrap(), 1).unwrap() {
            if !c.passed {
                failures.push(format!("d={dim} {} = {:e} > {:e}", c.name, c.value, c.tolerance));
            }
        }
    }
    let z = synthetic_recovery(bench);
    if z > 3.0 {
        failures.push(format!("synthetic family off by {z:.2} standard errors"));
    }
    let small_tree = ExperimentConfig {
        grid: Some(vec![2, 3, 4]),
        replications: Some(20),
        points: 100,
        ..ExperimentConfig::new(Method::Tree)
    };
    let small_particle = ExperimentConfig {
        grid: Some(vec![9, 27, 81]),
        replications: Some(5),
        points: 100,
        ..ExperimentConfig::new(Method::Particle)
    };
    let identical = run_tree_experiment(&small_tree).unwrap().to_csv() == run_tree_experiment(&small_tree).unwrap().to_csv()
        && run_particle_experiment(&small_particle).unwrap().to_csv() == run_particle_experiment(&small_particle).unwrap().to_csv();
    if !identical {
        failures.push("CSV differs under seed reuse".into());
    }
    let summary = if failures.is_empty() {
        format!("oracle checks in d=1,2, synthetic recovery within {z:.2} SE, byte-identical CSV on seed reuse")
    } else {
        failures.join("; ")
    };
    o.line("9", failures.is_empty(), summary);

    let failed = o.passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed ({:.0}s)", o.passed.len() - failed, o.passed.len(), start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

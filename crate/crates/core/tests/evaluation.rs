use rand::Rng;
use soc_core::evaluation::{fit_rate, gen_eval_points, mse_evaluate, simulation_indicator, EvalPointSet, PointMode, Replica};
use soc_core::lq::{lq_optimal_policy, lq_problem, LqBenchmark, LqOptimalPolicy};
use soc_core::policy::{mean_policy, FeedbackPolicy, PolicyKind};
use soc_core::tree::{build_tree, solve_tree_lq_analytic, tree_policy};
use soc_core::{Purpose, SeedPlan};

/// `γ* + bias + shift`, one shift per replica.
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

fn setup(dim: usize, points: usize) -> (LqBenchmark, LqOptimalPolicy, EvalPointSet) {
    let bench = LqBenchmark::new(4, 1.0, dim).unwrap();
    let problem = lq_problem(bench).unwrap();
    let optimal = lq_optimal_policy(bench).unwrap();
    let mut s = SeedPlan::new(3).stream(Purpose::EvalPoints, 0);
    let pts = gen_eval_points(&problem, &optimal, points, PointMode::Qmc, &mut s).unwrap();
    (bench, optimal, pts)
}

#[test]
fn synthetic_family_recovers_bias_and_variance() {
    let (_, optimal, pts) = setup(1, 200);
    let (bias, var, reps) = (0.3, 0.04, 4000);
    let half = (3.0 * var as f64).sqrt();
    let plan = SeedPlan::new(11);
    let report = mse_evaluate(
        |r| {
            let z: f64 = plan.stream(Purpose::Custom(1), r as u64).random_range(-half..half);
            Ok(Replica::Ready(Shifted { optimal, offset: bias + z }))
        },
        &optimal,
        &pts,
        reps,
    )
    .unwrap();
    let n = reps as f64;
    let se_bias = (4.0 * bias * bias * var / n).sqrt();
    // fourth moment of a uniform is 9v²/5
    let se_var = ((1.8 - 1.0) * var * var / n).sqrt();
    for t in 0..4 {
        assert!((report.squared_bias[t] - bias * bias).abs() <= 3.0 * se_bias, "t={t}: {}", report.squared_bias[t]);
        assert!((report.variance[t] - var).abs() <= 3.0 * se_var, "t={t}: {}", report.variance[t]);
        assert!((report.mse[t] - report.squared_bias[t] - report.variance[t]).abs() <= 1e-15);
        assert!((report.mse[t] - report.direct_mse[t]).abs() <= 1e-12);
    }
}

#[test]
fn exact_optimum_has_zero_error() {
    let (_, optimal, pts) = setup(2, 100);
    let report = mse_evaluate(|_| Ok(Replica::Ready(optimal)), &optimal, &pts, 3).unwrap();
    // only the rounding of the replica mean remains
    assert!(report.mse.iter().all(|&m| m < 1e-30));
    assert!(report.direct_mse.iter().all(|&m| m == 0.0));
    assert_eq!(report.replications, 3);
}

#[test]
fn excluded_replications_are_counted() {
    let (_, optimal, pts) = setup(1, 50);
    let report = mse_evaluate(
        |r| {
            Ok(if r % 3 == 0 {
                Replica::Excluded("diverged".into())
            } else {
                Replica::Ready(Shifted { optimal, offset: r as f64 })
            })
        },
        &optimal,
        &pts,
        9,
    )
    .unwrap();
    assert_eq!(report.excluded, 3);
    assert_eq!(report.replications, 6);
    let offsets = [1.0, 2.0, 4.0, 5.0, 7.0, 8.0];
    let mean = offsets.iter().sum::<f64>() / 6.0;
    let var = offsets.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / 6.0;
    assert!((report.squared_bias[0] - mean * mean).abs() < 1e-12);
    assert!((report.variance[0] - var).abs() < 1e-12);
}

#[test]
fn optimal_simulation_indicator_is_zero() {
    for dim in [1, 2] {
        let bench = LqBenchmark::new(4, 1.0, dim).unwrap();
        let problem = lq_problem(bench).unwrap();
        let optimal = lq_optimal_policy(bench).unwrap();
        let mut s = SeedPlan::new(4).stream(Purpose::Simulation, 0);
        assert_eq!(simulation_indicator(&optimal, &optimal, &problem, 500, &mut s).unwrap(), 0.0);
    }
}

#[test]
fn eval_points_follow_the_optimal_law() {
    // x_0 ~ U[-1,1]: mean 0, variance 1/3
    let (bench, _, pts) = setup(1, 4096);
    let x0 = pts.stage(0);
    let mean = x0.iter().sum::<f64>() / x0.len() as f64;
    let var = x0.iter().map(|v| v * v).sum::<f64>() / x0.len() as f64;
    assert!(mean.abs() < 1e-3);
    assert!((var - 1.0 / 3.0).abs() < 1e-3);
    // under γ*, x_{t+1} = x_t (T−t−1+ε)/(T−t+ε) + w, so Var grows as (1/3)(1 + a² + ...)
    let mut expected = 1.0 / 3.0;
    for t in 0..3 {
        let a = (bench.horizon - t - 1) as f64 + bench.epsilon;
        let a = a / ((bench.horizon - t) as f64 + bench.epsilon);
        expected = a * a * expected + 1.0 / 3.0;
        let xs = pts.stage(t + 1);
        let v = xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
        assert!((v - expected).abs() < 5e-3, "t={}: {v} vs {expected}", t + 1);
    }
}

#[test]
fn qmc_and_pseudo_random_bias_agree() {
    let bench = LqBenchmark::new(4, 1.0, 1).unwrap();
    let problem = lq_problem(bench).unwrap();
    let optimal = lq_optimal_policy(bench).unwrap();
    let plan = SeedPlan::new(21);
    let policies: Vec<_> = (0..100)
        .map(|r| {
            let tree = build_tree(&problem, 3, &mut plan.stream(Purpose::Tree, r)).unwrap();
            let sol = solve_tree_lq_analytic(&tree, 1.0).unwrap();
            tree_policy(&tree, &sol, 1, 1).unwrap()
        })
        .collect();

    let per_point = |mode: PointMode| {
        let pts = gen_eval_points(&problem, &optimal, 1000, mode, &mut plan.stream(Purpose::EvalPoints, 0)).unwrap();
        let mean = mean_policy(&policies, &pts.points).unwrap();
        (0..4)
            .map(|t| {
                pts.stage(t)
                    .iter()
                    .zip(&mean[t])
                    .map(|(x, m)| {
                        let u = optimal.eval(t, &[*x]).unwrap()[0];
                        (u - m) * (u - m)
                    })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let qmc = per_point(PointMode::Qmc);
    let mc = per_point(PointMode::PseudoRandom);
    for t in 0..4 {
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
            (m, var / n)
        };
        let (a, va) = stats(&qmc[t]);
        let (b, vb) = stats(&mc[t]);
        assert!((a - b).abs() <= 3.0 * (va + vb).sqrt(), "t={t}: {a} vs {b}");
    }
}

#[test]
fn rate_fit_on_noisy_power_law() {
    let sizes = [27.0, 81.0, 243.0, 729.0];
    let errors: Vec<f64> = sizes.iter().zip([1.02, 0.97, 1.01, 0.99]).map(|(s, k)| k * 3.0 / s).collect();
    let fit = fit_rate(&sizes, &errors).unwrap();
    assert!((fit.slope + 1.0).abs() < 0.02);
    assert!(fit.residual < 0.03);
}

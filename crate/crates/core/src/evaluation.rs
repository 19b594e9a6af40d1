//! Strategy error of a sample-based method against the optimal strategy.
//!
//! The MSE at stage `t` is the expectation, over the scenario draws used to
//! build the approximate strategy `Γ`, of `∫ ‖γ*_t(x) − Γ_t(x)‖² μ*_t(dx)`,
//! where `μ*_t` is the law of the optimal state. It splits into the squared
//! bias `∫ ‖γ*_t − γ_t‖² dμ*_t` (with `γ = E Γ`) and the variance
//! `E ∫ ‖γ_t − Γ_t‖² dμ*_t`.
//!
//! `μ*_t` is sampled by pushing (quasi-)random noise points through the
//! optimal closed loop; the outer expectation is a Monte-Carlo average over
//! independent replications of the method.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::sample_scenarios;
use crate::policy::FeedbackPolicy;
use crate::problem::ControlProblem;
use crate::qmc::Halton;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointMode {
    /// Randomly shifted Halton points.
    Qmc,
    PseudoRandom,
}

/// Per-stage states distributed according to the optimal-state law.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPointSet {
    pub mode: PointMode,
    pub count: usize,
    pub state_dim: usize,
    /// `points[t]`, `t = 0..T-1`, flat `count × state_dim`.
    pub points: Vec<Vec<f64>>,
}

impl EvalPointSet {
    pub fn stage(&self, t: usize) -> &[f64] {
        &self.points[t]
    }
}

/// Samples `count` optimal closed-loop trajectories and keeps their states at
/// each control stage.
pub fn gen_eval_points<P, G, R>(problem: &P, optimal: &G, count: usize, mode: PointMode, stream: &mut R) -> Result<EvalPointSet>
where
    P: ControlProblem + ?Sized,
    G: FeedbackPolicy + ?Sized,
    R: Rng + ?Sized,
{
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation point".into()));
    }
    let d = problem.dims();
    let (horizon, nx, nu, nw) = (d.horizon, d.state_dim, d.control_dim, d.noise_dim);
    let noise = problem.noise();
    let dim = horizon * nw;
    let halton = match mode {
        PointMode::Qmc => Some(Halton::shifted(dim, stream)),
        PointMode::PseudoRandom => None,
    };

    let mut points = vec![Vec::with_capacity(count * nx); horizon];
    let mut uni = vec![0.0; dim];
    let mut w = vec![0.0; nw];
    let mut x = vec![0.0; nx];
    let mut next = vec![0.0; nx];
    let mut u = vec![0.0; nu];
    for p in 0..count {
        match &halton {
            Some(h) => h.point(p as u64, &mut uni),
            None => uni.iter_mut().for_each(|v| *v = stream.random::<f64>()),
        }
        noise.stage(0).from_uniform(&uni[..nw], &mut x);
        points[0].extend_from_slice(&x);
        for s in 0..horizon - 1 {
            optimal.eval_into(s, &x, &mut u)?;
            noise.stage(s + 1).from_uniform(&uni[(s + 1) * nw..(s + 2) * nw], &mut w);
            problem.dynamics(s, &x, &u, &w, &mut next);
            std::mem::swap(&mut x, &mut next);
            points[s + 1].extend_from_slice(&x);
        }
    }
    Ok(EvalPointSet {
        mode,
        count,
        state_dim: nx,
        points,
    })
}

/// Which method and discretisation size produced a report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MethodInfo {
    pub method: String,
    pub param_name: String,
    pub param_value: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    pub info: MethodInfo,
    pub squared_bias: Vec<f64>,
    /// Normalised by `1/R`, so that `mse = squared_bias + variance` exactly.
    pub variance: Vec<f64>,
    pub mse: Vec<f64>,
    /// `(1/P) Σ_p (1/R) Σ_r ‖γ*(x_p) − Γ_r(x_p)‖²`, computed independently of
    /// the decomposition.
    pub direct_mse: Vec<f64>,
    /// Replications that entered the averages.
    pub replications: usize,
    pub excluded: usize,
    pub points: usize,
    pub seed: u64,
}

impl MseReport {
    pub fn total_mse(&self) -> f64 {
        self.mse.iter().sum()
    }
}

/// Outcome of building one replication's strategy.
#[derive(Debug)]
pub enum Replica<P> {
    Ready(P),
    /// The solver did not converge; the replication is left out of the averages.
    Excluded(String),
}

/// Estimates squared bias, variance and MSE per stage from `replications`
/// independent strategies.
///
/// `make_policy(r)` must be a pure function of `r` (each replication draws
/// from its own stream); replications run in parallel and are reduced in
/// index order, so the report does not depend on scheduling.
pub fn mse_evaluate<F, P, G>(make_policy: F, optimal: &G, points: &EvalPointSet, replications: usize) -> Result<MseReport>
where
    F: Fn(usize) -> Result<Replica<P>> + Sync,
    P: FeedbackPolicy,
    G: FeedbackPolicy + ?Sized,
{
    if replications < 2 {
        return Err(Error::InvalidArgument("variance needs at least 2 replications".into()));
    }
    let horizon = points.points.len();
    let nx = points.state_dim;
    let nu = optimal.control_dim();
    let block = points.count * nu;

    let optimal_values = eval_on_points(optimal, points, nu)?;

    let outcomes: Vec<Result<Option<Vec<f64>>>> = (0..replications)
        .into_par_iter()
        .map(|r| match make_policy(r)? {
            Replica::Ready(p) => {
                if p.state_dim() != nx || p.control_dim() != nu || p.horizon() < horizon {
                    return Err(Error::InvalidArgument(format!("replication {r} has mismatched dimensions")));
                }
                eval_on_points(&p, points, nu).map(Some)
            }
            Replica::Excluded(_) => Ok(None),
        })
        .collect();

    let mut evals = Vec::with_capacity(replications);
    let mut excluded = 0;
    for o in outcomes {
        match o? {
            Some(v) => evals.push(v),
            None => excluded += 1,
        }
    }
    let used = evals.len();
    if used == 0 {
        return Err(Error::InvalidArgument("every replication was excluded".into()));
    }

    let inv_r = 1.0 / used as f64;
    let inv_p = 1.0 / points.count as f64;
    let mut mean = vec![0.0; horizon * block];
    for e in &evals {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_r);

    let mut squared_bias = vec![0.0; horizon];
    let mut variance = vec![0.0; horizon];
    let mut direct = vec![0.0; horizon];
    for t in 0..horizon {
        let range = t * block..(t + 1) * block;
        let opt = &optimal_values[range.clone()];
        let m = &mean[range.clone()];
        squared_bias[t] = opt.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * inv_p;
        let mut var = 0.0;
        let mut dir = 0.0;
        for e in &evals {
            let v = &e[range.clone()];
            var += v.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            dir += v.iter().zip(opt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        variance[t] = var * inv_r * inv_p;
        direct[t] = dir * inv_r * inv_p;
    }
    let mse = squared_bias.iter().zip(&variance).map(|(b, v)| b + v).collect();

    Ok(MseReport {
        info: MethodInfo::default(),
        squared_bias,
        variance,
        mse,
        direct_mse: direct,
        replications: used,
        excluded,
        points: points.count,
        seed: 0,
    })
}

fn eval_on_points<G: FeedbackPolicy + ?Sized>(policy: &G, points: &EvalPointSet, nu: usize) -> Result<Vec<f64>> {
    let nx = points.state_dim;
    let mut out = vec![0.0; points.points.len() * points.count * nu];
    let mut chunks = out.chunks_exact_mut(nu);
    for (t, pts) in points.points.iter().enumerate() {
        for x in pts.chunks_exact(nx) {
            policy.eval_into(t, x, chunks.next().expect("sized above"))?;
        }
    }
    Ok(out)
}

/// Closed-loop indicator: mean over `M` fresh scenarios and the `T` stages of
/// `‖u†_t − u*_t‖²`, where `u†` follows `policy` along its own trajectory and
/// `u*` follows `optimal` along its own, both driven by the same noises.
pub fn simulation_indicator<P, G, Q, R>(policy: &P, optimal: &G, problem: &Q, scenarios: usize, stream: &mut R) -> Result<f64>
where
    P: FeedbackPolicy + ?Sized,
    G: FeedbackPolicy + ?Sized,
    Q: ControlProblem + ?Sized,
    R: Rng + ?Sized,
{
    let batch = sample_scenarios(problem, scenarios, stream)?;
    let d = problem.dims();
    let (horizon, nx, nu) = (d.horizon, d.state_dim, d.control_dim);
    let mut xa = vec![0.0; nx];
    let mut xb = vec![0.0; nx];
    let mut next = vec![0.0; nx];
    let mut ua = vec![0.0; nu];
    let mut ub = vec![0.0; nu];
    let mut total = 0.0;
    for i in 0..batch.count() {
        xa.copy_from_slice(batch.noise(i, 0));
        xb.copy_from_slice(batch.noise(i, 0));
        for t in 0..horizon {
            policy.eval_into(t, &xa, &mut ua)?;
            optimal.eval_into(t, &xb, &mut ub)?;
            total += ua.iter().zip(&ub).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let w = batch.noise(i, t + 1);
            problem.dynamics(t, &xa, &ua, w, &mut next);
            xa.copy_from_slice(&next);
            problem.dynamics(t, &xb, &ub, w, &mut next);
            xb.copy_from_slice(&next);
        }
    }
    Ok(total / (batch.count() * horizon) as f64)
}

/// Power-law fit `error ≈ exp(intercept) · size^slope`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub sizes: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Ordinary least squares of `ln error` on `ln size`.
pub fn fit_rate(sizes: &[f64], errors: &[f64]) -> Result<RateFit> {
    if sizes.len() != errors.len() {
        return Err(Error::RateFit("sizes and errors differ in length".into()));
    }
    if sizes.len() < 3 {
        return Err(Error::RateFit(format!("got {} points", sizes.len())));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::RateFit(format!("non-positive error {e}")));
    }
    if let Some(s) = sizes.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::RateFit(format!("non-positive size {s}")));
    }
    let lx: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::RateFit("all sizes are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(RateFit {
        sizes: sizes.to_vec(),
        errors: errors.to_vec(),
        slope,
        intercept,
        residual: (ss / n).sqrt(),
    })
}

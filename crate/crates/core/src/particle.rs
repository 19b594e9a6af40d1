//! Particle method: sampled first-order optimality conditions solved by a
//! gradient iteration on per-particle controls.
//!
//! Each iteration integrates the `N` state particles forward, integrates the
//! adjoint particles backward, and takes a gradient step on every control
//! particle. Conditional expectations given the state are replaced by
//! averages over all `N` noise particles of the next stage, with the next
//! adjoint read off a regression fitted on the next-stage `(state, adjoint)`
//! particles:
//!
//! ```text
//! Λ_T^i = ∂V/∂x(x_T^i)ᵀ
//! Λ_t^i = ∂C_t/∂x(x_t^i, u_t^i)ᵀ + (1/N) Σ_j ∂f_t/∂x(x_t^i, u_t^i, w_{t+1}^j)ᵀ Λ̃_{t+1}(f_t(x_t^i, u_t^i, w_{t+1}^j))
//! g_t^i = ∂C_t/∂u(x_t^i, u_t^i)ᵀ + (1/N) Σ_j ∂f_t/∂u(x_t^i, u_t^i, w_{t+1}^j)ᵀ Λ̃_{t+1}(f_t(x_t^i, u_t^i, w_{t+1}^j))
//! ```
//!
//! The `j` sums run over the noise particles in a fixed order (ascending
//! noise vectors), so results do not depend on how scenarios are indexed.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::ScenarioBatch;
use crate::policy::{fit_nearest_neighbor, NearestNeighborPolicy, StagePairs};
use crate::problem::ControlProblem;
use crate::regression::{RegressionOperator, StageRegression};

#[derive(Debug, Clone, PartialEq)]
pub enum InitialControls {
    /// The same control vector (`n_u` entries) for every particle and stage.
    Constant(Vec<f64>),
    /// Full `N × T × n_u` array.
    Supplied(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSolveConfig {
    /// Gradient step `ρ`.
    pub step: f64,
    /// Stop once every particle gradient has norm `<= tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub initial_controls: InitialControls,
    /// Abort when the max gradient norm exceeds this multiple of its first value.
    pub divergence_factor: f64,
}

impl ParticleSolveConfig {
    /// Defaults for the linear-quadratic benchmark: `ρ = 0.1/(1+ε)`, `tol = 1e-4`.
    pub fn for_lq(epsilon: f64, control_dim: usize) -> Self {
        Self {
            step: 0.1 / (1.0 + epsilon),
            tol: 1e-4,
            max_iter: 10_000,
            initial_controls: InitialControls::Constant(vec![0.0; control_dim]),
            divergence_factor: 1e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Diverged,
}

/// Particles at termination of [`particle_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub scenarios: ScenarioBatch,
    /// `N × (T+1) × n_x`.
    pub states: Vec<f64>,
    /// `N × T × n_u`.
    pub controls: Vec<f64>,
    /// `N × (T+1) × n_x`.
    pub adjoints: Vec<f64>,
    /// `N × T × n_u`, at the returned controls.
    pub gradients: Vec<f64>,
    /// Gradient steps taken.
    pub iterations: usize,
    /// Max particle gradient norm at each visited iterate.
    pub grad_history: Vec<f64>,
    /// Empirical objective at each visited iterate.
    pub objective_history: Vec<f64>,
    pub status: SolveStatus,
}

impl ParticleSystem {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_history.last().expect("at least one iterate")
    }

    /// Iteration trace CSV: `iter,max_grad_norm,empirical_objective`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iter,max_grad_norm,empirical_objective\n");
        for (k, (g, o)) in self.grad_history.iter().zip(&self.objective_history).enumerate() {
            let _ = writeln!(s, "{k},{g},{o}");
        }
        s
    }
}

struct Layout {
    n: usize,
    horizon: usize,
    nx: usize,
    nu: usize,
    nw: usize,
}

impl Layout {
    fn new<P: ControlProblem + ?Sized>(problem: &P, scenarios: &ScenarioBatch) -> Result<Self> {
        let d = problem.dims();
        if scenarios.stages() != d.horizon + 1 || scenarios.noise_dim() != d.noise_dim {
            return Err(Error::InvalidArgument("scenario batch does not match problem dimensions".into()));
        }
        if d.state_dim != d.noise_dim {
            return Err(Error::InvalidArgument("x_0 = w_0 needs n_x == n_w".into()));
        }
        Ok(Self {
            n: scenarios.count(),
            horizon: d.horizon,
            nx: d.state_dim,
            nu: d.control_dim,
            nw: d.noise_dim,
        })
    }

    fn state_len(&self) -> usize {
        self.n * (self.horizon + 1) * self.nx
    }

    fn control_len(&self) -> usize {
        self.n * self.horizon * self.nu
    }

    #[inline]
    fn x(&self, i: usize, t: usize) -> Range {
        let s = (i * (self.horizon + 1) + t) * self.nx;
        s..s + self.nx
    }

    #[inline]
    fn u(&self, i: usize, t: usize) -> Range {
        let s = (i * self.horizon + t) * self.nu;
        s..s + self.nu
    }

    fn check(&self, what: &'static str, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::Shape { what, expected, got });
        }
        Ok(())
    }
}

type Range = std::ops::Range<usize>;

/// `x_0^i = w_0^i`, `x_{t+1}^i = f_t(x_t^i, u_t^i, w_{t+1}^i)`.
pub fn forward_pass<P: ControlProblem + ?Sized>(problem: &P, controls: &[f64], scenarios: &ScenarioBatch) -> Result<Vec<f64>> {
    let l = Layout::new(problem, scenarios)?;
    l.check("particle controls", controls.len(), l.control_len())?;
    let mut states = vec![0.0; l.state_len()];
    forward_into(problem, &l, controls, scenarios, &mut states)?;
    Ok(states)
}

fn forward_into<P: ControlProblem + ?Sized>(problem: &P, l: &Layout, controls: &[f64], scenarios: &ScenarioBatch, states: &mut [f64]) -> Result<()> {
    let block = (l.horizon + 1) * l.nx;
    states.par_chunks_mut(block).enumerate().try_for_each(|(i, traj)| {
        traj[..l.nx].copy_from_slice(scenarios.noise(i, 0));
        for t in 0..l.horizon {
            let (head, tail) = traj.split_at_mut((t + 1) * l.nx);
            let u = &controls[l.u(i, t)];
            problem.dynamics(t, &head[t * l.nx..], u, scenarios.noise(i, t + 1), &mut tail[..l.nx]);
            if tail[..l.nx].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "state",
                    particle: i,
                    stage: t + 1,
                });
            }
        }
        Ok(())
    })
}

/// Noise particle order used by every `j` sum: ascending noise vectors
/// (lexicographic), ties by index.
fn noise_order(scenarios: &ScenarioBatch, t: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenarios.count()).collect();
    order.sort_by(|&a, &b| {
        let (wa, wb) = (scenarios.noise(a, t), scenarios.noise(b, t));
        wa.iter()
            .zip(wb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Which outputs a backward sweep produces.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Sweep {
    /// Compute adjoints (and gradients when requested).
    Adjoints { gradients: bool },
    /// Adjoints are given; compute gradients only.
    GradientsOnly,
}

struct Scratch {
    jx: Vec<f64>,
    ju: Vec<f64>,
    y: Vec<f64>,
    lam: Vec<f64>,
    queries: Vec<f64>,
    lams: Vec<f64>,
}

impl Scratch {
    fn new(l: &Layout) -> Self {
        Self {
            jx: vec![0.0; l.nx * l.nx],
            ju: vec![0.0; l.nx * l.nu],
            y: vec![0.0; l.nx],
            lam: vec![0.0; l.nx],
            queries: Vec::with_capacity(l.n),
            lams: vec![0.0; l.n * l.nx],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_sweep<P, R>(
    problem: &P,
    l: &Layout,
    states: &[f64],
    controls: &[f64],
    scenarios: &ScenarioBatch,
    regression: &R,
    mode: Sweep,
    adjoints: &mut [f64],
    gradients: &mut [f64],
) -> Result<()>
where
    P: ControlProblem + ?Sized,
    R: RegressionOperator,
{
    let (n, horizon, nx, nu) = (l.n, l.horizon, l.nx, l.nu);
    let with_adjoint = matches!(mode, Sweep::Adjoints { .. });
    let with_grad = !matches!(mode, Sweep::Adjoints { gradients: false });
    if with_adjoint {
        for i in 0..n {
            let r = l.x(i, horizon);
            problem.final_cost_dx(&states[r.clone()], &mut adjoints[r]);
            check_finite(&adjoints[l.x(i, horizon)], "adjoint", i, horizon)?;
        }
    }
    let additive = problem.additive_noise();
    let inv_n = 1.0 / n as f64;

    for t in (0..horizon).rev() {
        let mut centers = Vec::with_capacity(n * nx);
        let mut values = Vec::with_capacity(n * nx);
        for j in 0..n {
            centers.extend_from_slice(&states[l.x(j, t + 1)]);
            values.extend_from_slice(&adjoints[l.x(j, t + 1)]);
        }
        let next_adjoint = regression.fit(centers, values, nx, nx)?;
        let order = noise_order(scenarios, t + 1);
        let zero_w = vec![0.0; l.nw];

        // per particle: (Λ_t^i, g_t^i)
        let per_particle: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n)
            .into_par_iter()
            .map_init(
                || Scratch::new(l),
                |s, i| {
                    let x = &states[l.x(i, t)];
                    let u = &controls[l.u(i, t)];
                    let mut acc_x = vec![0.0; nx];
                    let mut acc_u = vec![0.0; nu];
                    if additive {
                        let w0 = scenarios.noise(order[0], t + 1);
                        problem.dynamics_dx(t, x, u, w0, &mut s.jx);
                        problem.dynamics_du(t, x, u, w0, &mut s.ju);
                        problem.dynamics(t, x, u, &zero_w, &mut s.y);
                        if nx == 1 {
                            s.queries.clear();
                            s.queries.extend(order.iter().map(|&j| s.y[0] + scenarios.noise(j, t + 1)[0]));
                            next_adjoint.eval_sorted_1d(&s.queries, &mut s.lams);
                        } else {
                            let mut q = vec![0.0; nx];
                            for (k, &j) in order.iter().enumerate() {
                                let w = scenarios.noise(j, t + 1);
                                for c in 0..nx {
                                    q[c] = s.y[c] + w[c];
                                }
                                next_adjoint.eval_into(&q, &mut s.lams[k * nx..(k + 1) * nx]);
                            }
                        }
                        // the Jacobians do not depend on w: sum the adjoints first
                        s.lam.iter_mut().for_each(|v| *v = 0.0);
                        for row in s.lams.chunks_exact(nx) {
                            for c in 0..nx {
                                s.lam[c] += row[c];
                            }
                        }
                        accumulate(&s.jx, &s.ju, &s.lam, &mut acc_x, &mut acc_u, nx, nu);
                    } else {
                        for &j in &order {
                            let w = scenarios.noise(j, t + 1);
                            problem.dynamics(t, x, u, w, &mut s.y);
                            next_adjoint.eval_into(&s.y, &mut s.lam);
                            problem.dynamics_dx(t, x, u, w, &mut s.jx);
                            problem.dynamics_du(t, x, u, w, &mut s.ju);
                            accumulate(&s.jx, &s.ju, &s.lam, &mut acc_x, &mut acc_u, nx, nu);
                        }
                    }
                    let mut lam_t = vec![0.0; nx];
                    if with_adjoint {
                        problem.stage_cost_dx(t, x, u, &mut lam_t);
                        for c in 0..nx {
                            lam_t[c] += acc_x[c] * inv_n;
                        }
                        check_finite(&lam_t, "adjoint", i, t)?;
                    }
                    let mut g = vec![0.0; nu];
                    if with_grad {
                        problem.stage_cost_du(t, x, u, &mut g);
                        for c in 0..nu {
                            g[c] += acc_u[c] * inv_n;
                        }
                        check_finite(&g, "gradient", i, t)?;
                    }
                    Ok((lam_t, g))
                },
            )
            .collect();

        for (i, res) in per_particle.into_iter().enumerate() {
            let (lam_t, g) = res?;
            if with_adjoint {
                adjoints[l.x(i, t)].copy_from_slice(&lam_t);
            }
            if with_grad {
                gradients[l.u(i, t)].copy_from_slice(&g);
            }
        }
    }
    Ok(())
}

#[inline]
fn accumulate(jx: &[f64], ju: &[f64], lam: &[f64], acc_x: &mut [f64], acc_u: &mut [f64], nx: usize, nu: usize) {
    for c in 0..nx {
        let mut s = 0.0;
        for r in 0..nx {
            s += jx[r * nx + c] * lam[r];
        }
        acc_x[c] += s;
    }
    for c in 0..nu {
        let mut s = 0.0;
        for r in 0..nx {
            s += ju[r * nu + c] * lam[r];
        }
        acc_u[c] += s;
    }
}

fn check_finite(v: &[f64], what: &'static str, particle: usize, stage: usize) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, particle, stage })
    }
}

/// Adjoint particles `N × (T+1) × n_x` for the given states and controls.
pub fn backward_pass<P, R>(problem: &P, states: &[f64], controls: &[f64], scenarios: &ScenarioBatch, regression: &R) -> Result<Vec<f64>>
where
    P: ControlProblem + ?Sized,
    R: RegressionOperator,
{
    let l = Layout::new(problem, scenarios)?;
    l.check("particle states", states.len(), l.state_len())?;
    l.check("particle controls", controls.len(), l.control_len())?;
    let mut adjoints = vec![0.0; l.state_len()];
    backward_sweep(problem, &l, states, controls, scenarios, regression, Sweep::Adjoints { gradients: false }, &mut adjoints, &mut [])?;
    Ok(adjoints)
}

/// Gradient particles `N × T × n_u`, using adjoints from [`backward_pass`].
pub fn gradient_pass<P, R>(problem: &P, states: &[f64], controls: &[f64], scenarios: &ScenarioBatch, adjoints: &[f64], regression: &R) -> Result<Vec<f64>>
where
    P: ControlProblem + ?Sized,
    R: RegressionOperator,
{
    let l = Layout::new(problem, scenarios)?;
    l.check("particle states", states.len(), l.state_len())?;
    l.check("particle controls", controls.len(), l.control_len())?;
    l.check("particle adjoints", adjoints.len(), l.state_len())?;
    let mut adjoints = adjoints.to_vec();
    let mut gradients = vec![0.0; l.control_len()];
    backward_sweep(problem, &l, states, controls, scenarios, regression, Sweep::GradientsOnly, &mut adjoints, &mut gradients)?;
    Ok(gradients)
}

/// `(1/N) Σ_i [Σ_t C_t(x_t^i, u_t^i) + V(x_T^i)]`.
pub fn empirical_objective<P: ControlProblem + ?Sized>(problem: &P, states: &[f64], controls: &[f64], scenarios: &ScenarioBatch) -> Result<f64> {
    let l = Layout::new(problem, scenarios)?;
    l.check("particle states", states.len(), l.state_len())?;
    l.check("particle controls", controls.len(), l.control_len())?;
    Ok(objective(problem, &l, states, controls))
}

fn objective<P: ControlProblem + ?Sized>(problem: &P, l: &Layout, states: &[f64], controls: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..l.n {
        for t in 0..l.horizon {
            total += problem.stage_cost(t, &states[l.x(i, t)], &controls[l.u(i, t)]);
        }
        total += problem.final_cost(&states[l.x(i, l.horizon)]);
    }
    total / l.n as f64
}

fn max_norm(v: &[f64], width: usize) -> f64 {
    v.chunks_exact(width)
        .map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Runs the particle gradient iteration until every gradient particle has
/// norm `<= tol`, `max_iter` steps were taken, or the gradient blows up.
pub fn particle_solve<P, R>(problem: &P, scenarios: ScenarioBatch, config: &ParticleSolveConfig, regression: &R) -> Result<ParticleSystem>
where
    P: ControlProblem + ?Sized,
    R: RegressionOperator,
{
    config.validate()?;
    let l = Layout::new(problem, &scenarios)?;
    let mut controls = match &config.initial_controls {
        InitialControls::Constant(c) => {
            l.check("constant initial control", c.len(), l.nu)?;
            c.iter().copied().cycle().take(l.control_len()).collect()
        }
        InitialControls::Supplied(c) => {
            l.check("initial controls", c.len(), l.control_len())?;
            c.clone()
        }
    };
    let mut states = vec![0.0; l.state_len()];
    let mut adjoints = vec![0.0; l.state_len()];
    let mut gradients = vec![0.0; l.control_len()];
    let mut grad_history = Vec::new();
    let mut objective_history = Vec::new();
    let mut iterations = 0;

    let status = loop {
        forward_into(problem, &l, &controls, &scenarios, &mut states)?;
        backward_sweep(
            problem,
            &l,
            &states,
            &controls,
            &scenarios,
            regression,
            Sweep::Adjoints { gradients: true },
            &mut adjoints,
            &mut gradients,
        )?;
        let norm = max_norm(&gradients, l.nu);
        grad_history.push(norm);
        objective_history.push(objective(problem, &l, &states, &controls));
        if norm <= config.tol {
            break SolveStatus::Converged;
        }
        if norm > config.divergence_factor * grad_history[0] {
            break SolveStatus::Diverged;
        }
        if iterations == config.max_iter {
            break SolveStatus::MaxIterations;
        }
        for (u, g) in controls.iter_mut().zip(&gradients) {
            *u -= config.step * g;
        }
        iterations += 1;
    };

    Ok(ParticleSystem {
        scenarios,
        states,
        controls,
        adjoints,
        gradients,
        iterations,
        grad_history,
        objective_history,
        status,
    })
}

/// Nearest-neighbour strategy on the per-stage `(x_t^i, u_t^i)` particles:
/// `N` pieces at every stage.
pub fn particle_policy<P: ControlProblem + ?Sized>(problem: &P, system: &ParticleSystem) -> Result<NearestNeighborPolicy> {
    let l = Layout::new(problem, &system.scenarios)?;
    let pairs = (0..l.horizon)
        .map(|t| {
            let mut p = StagePairs {
                states: Vec::with_capacity(l.n * l.nx),
                controls: Vec::with_capacity(l.n * l.nu),
            };
            for i in 0..l.n {
                p.states.extend_from_slice(&system.states[l.x(i, t)]);
                p.controls.extend_from_slice(&system.controls[l.u(i, t)]);
            }
            p
        })
        .collect();
    fit_nearest_neighbor(l.nx, l.nu, pairs)
}

/// [`particle_solve`] followed by [`particle_policy`].
pub fn particle_solve_policy<P, R>(problem: &P, scenarios: ScenarioBatch, config: &ParticleSolveConfig, regression: &R) -> Result<(ParticleSystem, NearestNeighborPolicy)>
where
    P: ControlProblem + ?Sized,
    R: RegressionOperator,
{
    let system = particle_solve(problem, scenarios, config, regression)?;
    let policy = particle_policy(problem, &system)?;
    Ok((system, policy))
}

//! Linear-quadratic benchmark with a closed-form optimal strategy.
//!
//! ```text
//! min E[ ε Σ_{t<T} ‖u_t‖² + ‖x_T‖² ]
//! x_{t+1} = x_t + u_t + w_{t+1},  x_0 = w_0,  w_t i.i.d. uniform on [-1, 1]^d
//! ```
//!
//! The value function is `ε/(T−t+ε)·‖x‖² + const`, which gives the optimal
//! feedback `γ*_t(x) = −x/(T−t+ε)` and the adjoint `Λ*_t(x) = 2εx/(T−t+ε)`.
//! The 2-D case is two independent copies of the 1-D problem.
//!
//! [`lq_grid_dp`] is an independent value-iteration oracle for the 1-D case.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseModel, UniformBox};
use crate::policy::{FeedbackPolicy, PolicyKind};
use crate::problem::{ControlProblem, Dimensions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqBenchmark {
    pub horizon: usize,
    pub epsilon: f64,
    pub dim: usize,
}

impl Default for LqBenchmark {
    fn default() -> Self {
        Self {
            horizon: 4,
            epsilon: 1.0,
            dim: 1,
        }
    }
}

impl LqBenchmark {
    pub fn new(horizon: usize, epsilon: f64, dim: usize) -> Result<Self> {
        let b = Self { horizon, epsilon, dim };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("LQ horizon must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("LQ epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(1..=2).contains(&self.dim) {
            return Err(Error::InvalidArgument(format!("LQ dimension must be 1 or 2, got {}", self.dim)));
        }
        Ok(())
    }

    /// `T − t + ε`.
    #[inline]
    fn denom(&self, t: usize) -> f64 {
        (self.horizon - t) as f64 + self.epsilon
    }
}

#[derive(Debug, Clone)]
pub struct LqProblem {
    bench: LqBenchmark,
    dims: Dimensions,
    noise: NoiseModel,
}

/// The benchmark as a [`ControlProblem`] with exact derivatives.
pub fn lq_problem(bench: LqBenchmark) -> Result<LqProblem> {
    bench.validate()?;
    let d = bench.dim;
    Ok(LqProblem {
        bench,
        dims: Dimensions::new(bench.horizon, d, d, d)?,
        noise: NoiseModel::iid(bench.horizon, Arc::new(UniformBox::symmetric_unit(d))),
    })
}

impl LqProblem {
    pub fn benchmark(&self) -> LqBenchmark {
        self.bench
    }
}

impl ControlProblem for LqProblem {
    fn dims(&self) -> Dimensions {
        self.dims
    }

    fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    #[inline]
    fn dynamics(&self, _t: usize, x: &[f64], u: &[f64], w: &[f64], next: &mut [f64]) {
        for k in 0..x.len() {
            next[k] = (x[k] + u[k]) + w[k];
        }
    }

    fn stage_cost(&self, _t: usize, _x: &[f64], u: &[f64]) -> f64 {
        self.bench.epsilon * u.iter().map(|v| v * v).sum::<f64>()
    }

    fn final_cost(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[inline]
    fn dynamics_dx(&self, _t: usize, _x: &[f64], _u: &[f64], _w: &[f64], jac: &mut [f64]) {
        identity(jac, self.bench.dim);
    }

    #[inline]
    fn dynamics_du(&self, _t: usize, _x: &[f64], _u: &[f64], _w: &[f64], jac: &mut [f64]) {
        identity(jac, self.bench.dim);
    }

    fn stage_cost_dx(&self, _t: usize, _x: &[f64], _u: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
    }

    fn stage_cost_du(&self, _t: usize, _x: &[f64], u: &[f64], grad: &mut [f64]) {
        for k in 0..u.len() {
            grad[k] = 2.0 * self.bench.epsilon * u[k];
        }
    }

    fn final_cost_dx(&self, x: &[f64], grad: &mut [f64]) {
        for k in 0..x.len() {
            grad[k] = 2.0 * x[k];
        }
    }

    fn additive_noise(&self) -> bool {
        true
    }
}

fn identity(jac: &mut [f64], n: usize) {
    jac.fill(0.0);
    for k in 0..n {
        jac[k * n + k] = 1.0;
    }
}

/// `γ*_t(x) = −x/(T−t+ε)`, componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqOptimalPolicy {
    bench: LqBenchmark,
}

pub fn lq_optimal_policy(bench: LqBenchmark) -> Result<LqOptimalPolicy> {
    bench.validate()?;
    Ok(LqOptimalPolicy { bench })
}

impl FeedbackPolicy for LqOptimalPolicy {
    fn horizon(&self) -> usize {
        self.bench.horizon
    }
    fn state_dim(&self) -> usize {
        self.bench.dim
    }
    fn control_dim(&self) -> usize {
        self.bench.dim
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::ClosedForm
    }
    #[inline]
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]) {
        let d = self.bench.denom(t);
        for k in 0..x.len() {
            out[k] = -x[k] / d;
        }
    }
}

/// Gradient of the optimal cost-to-go at `(t, x)`, `t = 0..=T`.
pub fn lq_optimal_adjoint(bench: &LqBenchmark, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    bench.validate()?;
    if t > bench.horizon {
        return Err(Error::StageOutOfRange {
            stage: t,
            horizon: bench.horizon,
        });
    }
    if x.len() != bench.dim {
        return Err(Error::Shape {
            what: "adjoint state",
            expected: bench.dim,
            got: x.len(),
        });
    }
    let scale = 2.0 * bench.epsilon / bench.denom(t);
    Ok(x.iter().map(|v| scale * v).collect())
}

/// Uniform 1-D grid `lo, lo+step, …, hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl UniformGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad grid [{lo}, {hi}] step {step}")));
        }
        Ok(Self { lo, hi, step })
    }

    /// Symmetric grid on `[-half_width, half_width]`.
    pub fn symmetric(half_width: f64, step: f64) -> Result<Self> {
        Self::new(-half_width, half_width, step)
    }

    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    fn refined(&self) -> Self {
        Self {
            step: self.step / 2.0,
            ..*self
        }
    }
}

/// Piecewise-linear interpolation on a uniform grid, extended linearly past
/// both ends.
fn interpolate(grid: &UniformGrid, table: &[f64], y: f64) -> f64 {
    let n = table.len();
    let s = ((y - grid.lo) / grid.step).clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    let frac = (y - grid.point(i)) / grid.step;
    table[i] + frac * (table[i + 1] - table[i])
}

/// Tabulated solution of the 1-D benchmark by backward value iteration.
#[derive(Debug, Clone)]
pub struct GridDpSolution {
    pub bench: LqBenchmark,
    pub x_grid: UniformGrid,
    /// `policy[t][i]`: minimising control at grid state `i`, `t = 0..T-1`.
    pub policy: Vec<Vec<f64>>,
    /// `value[t][i]`, `t = 0..=T`.
    pub value: Vec<Vec<f64>>,
}

impl GridDpSolution {
    /// Finite-difference slope of the value table at `x`.
    pub fn value_slope(&self, t: usize, x: f64) -> f64 {
        let h = self.x_grid.step;
        (interpolate(&self.x_grid, &self.value[t], x + h) - interpolate(&self.x_grid, &self.value[t], x - h)) / (2.0 * h)
    }

    /// Sup-norm distance to another tabulated policy over `[-half_width, half_width]`.
    pub fn policy_gap(&self, other: &GridDpSolution, half_width: f64) -> f64 {
        let mut gap: f64 = 0.0;
        for t in 0..self.policy.len() {
            for x in self.x_grid.points() {
                if x.abs() <= half_width + 1e-12 {
                    let a = interpolate(&self.x_grid, &self.policy[t], x);
                    let b = interpolate(&other.x_grid, &other.policy[t], x);
                    gap = gap.max((a - b).abs());
                }
            }
        }
        gap
    }

    /// Solves again on grids refined by two and reports the sup-norm change of
    /// the policy on `[-half_width, half_width]`, plus whether it exceeds `tol`
    /// (the grid is then too coarse for `tol`).
    pub fn refinement_check(&self, u_grid: &UniformGrid, quad_nodes: usize, half_width: f64, tol: f64) -> Result<(f64, bool)> {
        let fine = lq_grid_dp(self.bench, self.x_grid.refined(), u_grid.refined(), 2 * quad_nodes)?;
        let gap = self.policy_gap(&fine, half_width);
        Ok((gap, gap > tol))
    }
}

impl FeedbackPolicy for GridDpSolution {
    fn horizon(&self) -> usize {
        self.bench.horizon
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn kind(&self) -> PolicyKind {
        PolicyKind::Tabulated
    }
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]) {
        out[0] = interpolate(&self.x_grid, &self.policy[t], x[0]);
    }
}

/// Backward value iteration for the 1-D benchmark.
///
/// The expectation over `w` uses the midpoint rule with `quad_nodes` nodes on
/// `[-1, 1]`. The final cost is evaluated exactly; intermediate value
/// functions are interpolated linearly on `x_grid`. For each grid state the
/// best control on `u_grid` is refined by a parabola through it and its two
/// neighbours.
pub fn lq_grid_dp(bench: LqBenchmark, x_grid: UniformGrid, u_grid: UniformGrid, quad_nodes: usize) -> Result<GridDpSolution> {
    bench.validate()?;
    if bench.dim != 1 {
        return Err(Error::InvalidArgument("grid DP oracle is 1-D only".into()));
    }
    if quad_nodes == 0 {
        return Err(Error::InvalidArgument("need at least one quadrature node".into()));
    }
    let horizon = bench.horizon;
    let eps = bench.epsilon;
    let nodes: Vec<f64> = (0..quad_nodes)
        .map(|k| -1.0 + (2 * k + 1) as f64 / quad_nodes as f64)
        .collect();
    let inv_q = 1.0 / quad_nodes as f64;
    let xs = x_grid.points();
    let us = u_grid.points();

    let mut value = vec![Vec::new(); horizon + 1];
    let mut policy = vec![Vec::new(); horizon];
    value[horizon] = xs.iter().map(|x| x * x).collect();

    for t in (0..horizon).rev() {
        let next = &value[t + 1];
        let expected_next = |y: f64| -> f64 {
            let s: f64 = if t + 1 == horizon {
                nodes.iter().map(|w| (y + w) * (y + w)).sum()
            } else {
                nodes.iter().map(|w| interpolate(&x_grid, next, y + w)).sum()
            };
            s * inv_q
        };
        let q = |x: f64, u: f64| eps * u * u + expected_next(x + u);

        let mut v_t = Vec::with_capacity(xs.len());
        let mut p_t = Vec::with_capacity(xs.len());
        let mut qs = vec![0.0; us.len()];
        for &x in &xs {
            for (j, &u) in us.iter().enumerate() {
                qs[j] = q(x, u);
            }
            let (m, _) = qs
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bv), (j, &v)| if v < bv { (j, v) } else { (bi, bv) });
            let mut u_best = us[m];
            if m > 0 && m + 1 < us.len() {
                let (a, b, c) = (qs[m - 1], qs[m], qs[m + 1]);
                let curv = a - 2.0 * b + c;
                if curv > 0.0 {
                    u_best += 0.5 * (a - c) / curv * u_grid.step;
                }
            }
            p_t.push(u_best);
            v_t.push(q(x, u_best));
        }
        value[t] = v_t;
        policy[t] = p_t;
    }

    Ok(GridDpSolution {
        bench,
        x_grid,
        policy,
        value,
    })
}

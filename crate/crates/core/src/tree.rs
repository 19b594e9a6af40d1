//! Regularly branching scenario trees built by conditional sampling, and the
//! discretised problem on them:
//!
//! ```text
//! min  Σ_{i not leaf} π(i) C_θ(i)(x_i, u_i) + Σ_{i leaf} π(i) V(x_i)
//! s.t. x_i = f_θ(ν(i))(x_ν(i), u_ν(i), w_i)   for non-roots
//!      x_i = w_i                               for roots
//! ```
//!
//! Stage `t` holds `n_b^(t+1)` nodes (the tree has `n_b` roots). Nodes are
//! stored level by level; the children of the `l`-th node of stage `t` are
//! nodes `l·n_b .. (l+1)·n_b` of stage `t+1`, so every subtree is a
//! contiguous range at each deeper stage.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{fit_nearest_neighbor, NearestNeighborPolicy, StagePairs};
use crate::problem::ControlProblem;

pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    horizon: usize,
    branching: usize,
    noise_dim: usize,
    /// First node id of each stage, plus the total node count at the end.
    offsets: Vec<usize>,
    weights: Vec<f64>,
    noise: Vec<f64>,
}

/// Total node count `Σ_{t=0}^{T} n_b^(t+1)`, or `None` on overflow.
pub fn tree_node_count(branching: usize, horizon: usize) -> Option<u128> {
    let b = branching as u128;
    let mut level = 1u128;
    let mut total = 0u128;
    for _ in 0..=horizon {
        level = level.checked_mul(b)?;
        total = total.checked_add(level)?;
    }
    Some(total)
}

/// Samples a tree with the default node budget.
pub fn build_tree<P, R>(problem: &P, branching: usize, stream: &mut R) -> Result<ScenarioTree>
where
    P: ControlProblem + ?Sized,
    R: Rng + ?Sized,
{
    build_tree_with_budget(problem, branching, stream, DEFAULT_NODE_BUDGET)
}

/// Draws `n_b` stage-0 noises, then `n_b` independent children per node at
/// each later stage, parent by parent. Every node at stage `t` gets weight
/// `n_b^-(t+1)`.
pub fn build_tree_with_budget<P, R>(problem: &P, branching: usize, stream: &mut R, node_budget: usize) -> Result<ScenarioTree>
where
    P: ControlProblem + ?Sized,
    R: Rng + ?Sized,
{
    if branching == 0 {
        return Err(Error::InvalidArgument("branching factor must be >= 1".into()));
    }
    let dims = problem.dims();
    let horizon = dims.horizon;
    let requested = tree_node_count(branching, horizon).unwrap_or(u128::MAX);
    if requested > node_budget as u128 {
        return Err(Error::NodeBudget {
            requested,
            budget: node_budget,
        });
    }
    let total = requested as usize;
    let nw = dims.noise_dim;
    let noise_model = problem.noise();

    let mut offsets = Vec::with_capacity(horizon + 2);
    let mut weights = Vec::with_capacity(total);
    let mut level = 1usize;
    let mut start = 0usize;
    for _ in 0..=horizon {
        level *= branching;
        offsets.push(start);
        weights.extend(std::iter::repeat_n(1.0 / level as f64, level));
        start += level;
    }
    offsets.push(start);

    let mut noise = vec![0.0; total * nw];
    let mut scratch = vec![0.0; nw];
    for t in 0..=horizon {
        for i in offsets[t]..offsets[t + 1] {
            noise_model.draw(t, stream, &mut scratch, &mut noise[i * nw..(i + 1) * nw]);
        }
    }
    Ok(ScenarioTree {
        horizon,
        branching,
        noise_dim: nw,
        offsets,
        weights,
        noise,
    })
}

impl ScenarioTree {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets[self.horizon + 1]
    }

    /// Nodes carrying a control (stages `0..T`).
    pub fn num_inner(&self) -> usize {
        self.offsets[self.horizon]
    }

    /// Number of scenarios the tree encodes, `n_b^(T+1)`.
    pub fn scenario_count(&self) -> usize {
        self.nodes_at(self.horizon).len()
    }

    /// `θ⁻¹(t)`.
    pub fn nodes_at(&self, t: usize) -> Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    /// `θ(i)`.
    pub fn stage(&self, node: usize) -> usize {
        self.offsets.partition_point(|&o| o <= node) - 1
    }

    /// `ν(i)`, `None` for roots.
    pub fn parent(&self, node: usize) -> Option<usize> {
        let t = self.stage(node);
        (t > 0).then(|| self.offsets[t - 1] + (node - self.offsets[t]) / self.branching)
    }

    /// `F(i)`, empty for leaves.
    pub fn children(&self, node: usize) -> Range<usize> {
        let t = self.stage(node);
        if t == self.horizon {
            return node..node;
        }
        let first = self.offsets[t + 1] + (node - self.offsets[t]) * self.branching;
        first..first + self.branching
    }

    /// `F⁺(i)` as one contiguous range per deeper stage.
    pub fn descendants(&self, node: usize) -> Vec<Range<usize>> {
        let t = self.stage(node);
        let local = node - self.offsets[t];
        let mut width = 1;
        (t + 1..=self.horizon)
            .map(|s| {
                width *= self.branching;
                let first = self.offsets[s] + local * width;
                first..first + width
            })
            .collect()
    }

    pub fn roots(&self) -> Range<usize> {
        self.nodes_at(0)
    }

    pub fn leaves(&self) -> Range<usize> {
        self.nodes_at(self.horizon)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.offsets[self.horizon]
    }

    /// `π(i)`.
    pub fn weight(&self, node: usize) -> f64 {
        self.weights[node]
    }

    pub fn noise(&self, node: usize) -> &[f64] {
        &self.noise[node * self.noise_dim..(node + 1) * self.noise_dim]
    }

    pub fn set_noise(&mut self, node: usize, w: &[f64]) {
        self.noise[node * self.noise_dim..(node + 1) * self.noise_dim].copy_from_slice(w);
    }
}

/// States on every node and controls on inner nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSolution {
    /// `num_nodes × n_x`.
    pub states: Vec<f64>,
    /// `num_inner × n_u`.
    pub controls: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Largest per-node gradient norm at the returned controls.
    pub grad_norm: f64,
    /// Objective before each gradient step (gradient solver only).
    pub objective_history: Vec<f64>,
}

impl TreeSolution {
    pub fn state(&self, node: usize, nx: usize) -> &[f64] {
        &self.states[node * nx..(node + 1) * nx]
    }

    pub fn control(&self, node: usize, nu: usize) -> &[f64] {
        &self.controls[node * nu..(node + 1) * nu]
    }
}

fn check_tree<P: ControlProblem + ?Sized>(problem: &P, tree: &ScenarioTree) -> Result<()> {
    let d = problem.dims();
    if d.horizon != tree.horizon || d.noise_dim != tree.noise_dim {
        return Err(Error::InvalidArgument("tree does not match problem dimensions".into()));
    }
    Ok(())
}

/// States from controls: roots take their noise, children follow the dynamics.
pub fn propagate_tree<P: ControlProblem + ?Sized>(problem: &P, tree: &ScenarioTree, controls: &[f64]) -> Result<Vec<f64>> {
    check_tree(problem, tree)?;
    let d = problem.dims();
    let (nx, nu) = (d.state_dim, d.control_dim);
    if controls.len() != tree.num_inner() * nu {
        return Err(Error::Shape {
            what: "tree controls",
            expected: tree.num_inner() * nu,
            got: controls.len(),
        });
    }
    if nx != tree.noise_dim {
        return Err(Error::InvalidArgument("roots take x = w, so n_x must equal n_w".into()));
    }
    let mut states = vec![0.0; tree.num_nodes() * nx];
    for i in tree.roots() {
        states[i * nx..(i + 1) * nx].copy_from_slice(tree.noise(i));
    }
    for i in 0..tree.num_inner() {
        let t = tree.stage(i);
        let (head, tail) = states.split_at_mut((i + 1) * nx);
        let x = &head[i * nx..];
        let u = &controls[i * nu..(i + 1) * nu];
        for j in tree.children(i) {
            let off = (j - i - 1) * nx;
            problem.dynamics(t, x, u, tree.noise(j), &mut tail[off..off + nx]);
        }
    }
    Ok(states)
}

/// Weighted objective of the discretised problem.
pub fn tree_objective<P: ControlProblem + ?Sized>(problem: &P, tree: &ScenarioTree, states: &[f64], controls: &[f64]) -> f64 {
    let d = problem.dims();
    let (nx, nu) = (d.state_dim, d.control_dim);
    let mut total = 0.0;
    for i in 0..tree.num_inner() {
        total += tree.weight(i) * problem.stage_cost(tree.stage(i), &states[i * nx..(i + 1) * nx], &controls[i * nu..(i + 1) * nu]);
    }
    for i in tree.leaves() {
        total += tree.weight(i) * problem.final_cost(&states[i * nx..(i + 1) * nx]);
    }
    total
}

/// Per-node gradients `g_i`, normalised by `π(i)`, via the tree adjoint
/// recursion.
pub fn tree_gradient<P: ControlProblem + ?Sized>(problem: &P, tree: &ScenarioTree, states: &[f64], controls: &[f64]) -> Vec<f64> {
    let d = problem.dims();
    let (nx, nu) = (d.state_dim, d.control_dim);
    let mut adjoint = vec![0.0; tree.num_nodes() * nx];
    let mut grads = vec![0.0; tree.num_inner() * nu];
    for i in tree.leaves() {
        problem.final_cost_dx(&states[i * nx..(i + 1) * nx], &mut adjoint[i * nx..(i + 1) * nx]);
    }
    let mut jx = vec![0.0; nx * nx];
    let mut ju = vec![0.0; nx * nu];
    let mut lam = vec![0.0; nx];
    let mut g = vec![0.0; nu];
    for i in (0..tree.num_inner()).rev() {
        let t = tree.stage(i);
        let x = &states[i * nx..(i + 1) * nx];
        let u = &controls[i * nu..(i + 1) * nu];
        problem.stage_cost_dx(t, x, u, &mut lam);
        problem.stage_cost_du(t, x, u, &mut g);
        for j in tree.children(i) {
            let ratio = tree.weight(j) / tree.weight(i);
            let lj = &adjoint[j * nx..(j + 1) * nx];
            problem.dynamics_dx(t, x, u, tree.noise(j), &mut jx);
            problem.dynamics_du(t, x, u, tree.noise(j), &mut ju);
            for c in 0..nx {
                lam[c] += ratio * (0..nx).map(|r| jx[r * nx + c] * lj[r]).sum::<f64>();
            }
            for c in 0..nu {
                g[c] += ratio * (0..nx).map(|r| ju[r * nu + c] * lj[r]).sum::<f64>();
            }
        }
        adjoint[i * nx..(i + 1) * nx].copy_from_slice(&lam);
        grads[i * nu..(i + 1) * nu].copy_from_slice(&g);
    }
    grads
}

fn max_block_norm(v: &[f64], width: usize) -> f64 {
    v.chunks_exact(width)
        .map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeGradientConfig {
    pub step: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Starting controls (`num_inner × n_u`); zeros when absent.
    pub initial_controls: Option<Vec<f64>>,
}

impl TreeGradientConfig {
    /// Step `1/(T+2ε)` for the linear-quadratic benchmark, whose
    /// π-normalised Hessian has spectrum in `[2ε, 2(T+ε)]`.
    pub fn for_lq(horizon: usize, epsilon: f64) -> Self {
        Self {
            step: 1.0 / (horizon as f64 + 2.0 * epsilon),
            ..Self::default()
        }
    }
}

impl Default for TreeGradientConfig {
    fn default() -> Self {
        Self {
            step: 0.2,
            tol: 1e-10,
            max_iter: 100_000,
            initial_controls: None,
        }
    }
}

/// Fixed-step gradient descent on the discretised problem, stopping when every
/// node gradient has norm `<= tol`.
pub fn solve_tree_gradient<P: ControlProblem + ?Sized>(problem: &P, tree: &ScenarioTree, config: &TreeGradientConfig) -> Result<TreeSolution> {
    check_tree(problem, tree)?;
    if !(config.step > 0.0) || !(config.tol > 0.0) || config.max_iter == 0 {
        return Err(Error::InvalidArgument("tree solver needs step > 0, tol > 0, max_iter >= 1".into()));
    }
    let nu = problem.dims().control_dim;
    let mut controls = match &config.initial_controls {
        Some(c) => c.clone(),
        None => vec![0.0; tree.num_inner() * nu],
    };
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let states = propagate_tree(problem, tree, &controls)?;
        let objective = tree_objective(problem, tree, &states, &controls);
        let grads = tree_gradient(problem, tree, &states, &controls);
        let norm = max_block_norm(&grads, nu);
        history.push(objective);
        if norm <= config.tol || iterations == config.max_iter || !norm.is_finite() {
            return Ok(TreeSolution {
                states,
                controls,
                objective,
                converged: norm <= config.tol,
                iterations,
                grad_norm: norm,
                objective_history: history,
            });
        }
        for (u, g) in controls.iter_mut().zip(&grads) {
            *u -= config.step * g;
        }
        iterations += 1;
    }
}

/// Closed-form tree solution of the benchmark
/// `x_{t+1} = x_t + u_t + w_{t+1}`, cost `ε Σ ‖u‖² + ‖x_T‖²` (separable, so
/// applied componentwise when `n_x = n_u = n_w > 1`):
///
/// ```text
/// u_i = −(x_i + m_i) / (T − θ(i) + ε),   m_i = Σ_{j ∈ F⁺(i)} (π(j)/π(i)) w_j
/// ```
///
/// `m_i` is the tree's conditional expectation of the noise still to come
/// below node `i`.
pub fn solve_tree_lq_analytic(tree: &ScenarioTree, epsilon: f64) -> Result<TreeSolution> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let d = tree.noise_dim;
    let horizon = tree.horizon;
    let inner = tree.num_inner();
    let inv_b = 1.0 / tree.branching as f64;

    // m_i = (1/n_b) Σ_{j ∈ F(i)} (w_j + m_j), with m = 0 on leaves
    let mut future = vec![0.0; tree.num_nodes() * d];
    for i in (0..inner).rev() {
        for k in 0..d {
            let s: f64 = tree.children(i).map(|j| tree.noise(j)[k] + future[j * d + k]).sum();
            future[i * d + k] = s * inv_b;
        }
    }

    let mut states = vec![0.0; tree.num_nodes() * d];
    let mut controls = vec![0.0; inner * d];
    for i in tree.roots() {
        states[i * d..(i + 1) * d].copy_from_slice(tree.noise(i));
    }
    let mut objective = 0.0;
    for i in 0..inner {
        let denom = (horizon - tree.stage(i)) as f64 + epsilon;
        for k in 0..d {
            let u = -(states[i * d + k] + future[i * d + k]) / denom;
            controls[i * d + k] = u;
            objective += tree.weight(i) * epsilon * u * u;
        }
        for j in tree.children(i) {
            for k in 0..d {
                states[j * d + k] = (states[i * d + k] + controls[i * d + k]) + tree.noise(j)[k];
            }
        }
    }
    for i in tree.leaves() {
        objective += tree.weight(i) * states[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>();
    }
    Ok(TreeSolution {
        states,
        controls,
        objective,
        converged: true,
        iterations: 0,
        grad_norm: 0.0,
        objective_history: Vec::new(),
    })
}

/// Nearest-neighbour strategy from the per-stage node `(state, control)` pairs.
pub fn tree_policy(tree: &ScenarioTree, solution: &TreeSolution, state_dim: usize, control_dim: usize) -> Result<NearestNeighborPolicy> {
    let pairs = (0..tree.horizon)
        .map(|t| {
            let r = tree.nodes_at(t);
            StagePairs {
                states: solution.states[r.start * state_dim..r.end * state_dim].to_vec(),
                controls: solution.controls[r.start * control_dim..r.end * control_dim].to_vec(),
            }
        })
        .collect();
    fit_nearest_neighbor(state_dim, control_dim, pairs)
}

/// One CSV row per node: `node_id,t,parent_id,pi,w..,x..,u..`. Roots have an
/// empty parent and leaves empty controls.
pub fn tree_to_csv(tree: &ScenarioTree, solution: &TreeSolution, state_dim: usize, control_dim: usize) -> String {
    let mut s = String::from("node_id,t,parent_id,pi");
    for k in 0..tree.noise_dim {
        let _ = write!(s, ",w{k}");
    }
    for k in 0..state_dim {
        let _ = write!(s, ",x{k}");
    }
    for k in 0..control_dim {
        let _ = write!(s, ",u{k}");
    }
    s.push('\n');
    for i in 0..tree.num_nodes() {
        let parent = tree.parent(i).map(|p| p.to_string()).unwrap_or_default();
        let _ = write!(s, "{i},{},{parent},{}", tree.stage(i), tree.weight(i));
        for v in tree.noise(i).iter().chain(solution.state(i, state_dim)) {
            let _ = write!(s, ",{v}");
        }
        for k in 0..control_dim {
            if tree.is_leaf(i) {
                s.push(',');
            } else {
                let _ = write!(s, ",{}", solution.controls[i * control_dim + k]);
            }
        }
        s.push('\n');
    }
    s
}

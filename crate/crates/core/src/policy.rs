//! Feedback policies `t, x ↦ u` and their reconstruction from sampled
//! `(state, control)` pairs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::regression::{NearestNeighbor, NearestNeighborMap, RegressionOperator, StageRegression};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    NearestNeighbor,
    ClosedForm,
    Tabulated,
}

/// A per-stage state-feedback strategy defined for `t = 0..T-1`.
pub trait FeedbackPolicy: Send + Sync {
    fn horizon(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn kind(&self) -> PolicyKind;

    /// Number of pieces at stage `t`, when the policy is piecewise constant.
    fn support_size(&self, _t: usize) -> Option<usize> {
        None
    }

    /// Evaluates without argument checks.
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]);

    fn eval_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        if t >= self.horizon() {
            return Err(Error::StageOutOfRange {
                stage: t,
                horizon: self.horizon(),
            });
        }
        if x.len() != self.state_dim() {
            return Err(Error::Shape {
                what: "policy state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if out.len() != self.control_dim() {
            return Err(Error::Shape {
                what: "policy control",
                expected: self.control_dim(),
                got: out.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteQuery { stage: t });
        }
        self.evaluate(t, x, out);
        Ok(())
    }

    fn eval(&self, t: usize, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.control_dim()];
        self.eval_into(t, x, &mut out)?;
        Ok(out)
    }
}

impl<P: FeedbackPolicy + ?Sized> FeedbackPolicy for &P {
    fn horizon(&self) -> usize {
        (**self).horizon()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn kind(&self) -> PolicyKind {
        (**self).kind()
    }
    fn support_size(&self, t: usize) -> Option<usize> {
        (**self).support_size(t)
    }
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]) {
        (**self).evaluate(t, x, out)
    }
}

impl<P: FeedbackPolicy + ?Sized> FeedbackPolicy for Box<P> {
    fn horizon(&self) -> usize {
        (**self).horizon()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn kind(&self) -> PolicyKind {
        (**self).kind()
    }
    fn support_size(&self, t: usize) -> Option<usize> {
        (**self).support_size(t)
    }
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]) {
        (**self).evaluate(t, x, out)
    }
}

/// Sampled `(state, control)` pairs of one stage, flat row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StagePairs {
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
}

/// Policy whose stage maps come from a regression operator.
#[derive(Debug, Clone)]
pub struct RegressedPolicy<M> {
    stages: Vec<M>,
    state_dim: usize,
    control_dim: usize,
    kind: PolicyKind,
}

pub type NearestNeighborPolicy = RegressedPolicy<NearestNeighborMap>;

impl<M: StageRegression> RegressedPolicy<M> {
    pub fn stages(&self) -> &[M] {
        &self.stages
    }
}

/// Fits one regression per stage.
pub fn fit_policy<R: RegressionOperator>(
    operator: &R,
    kind: PolicyKind,
    state_dim: usize,
    control_dim: usize,
    pairs: Vec<StagePairs>,
) -> Result<RegressedPolicy<R::Fitted>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("policy needs at least one stage".into()));
    }
    let mut stages = Vec::with_capacity(pairs.len());
    for (t, p) in pairs.into_iter().enumerate() {
        if p.states.is_empty() {
            return Err(Error::EmptyStage(t));
        }
        stages.push(operator.fit(p.states, p.controls, state_dim, control_dim)?);
    }
    Ok(RegressedPolicy {
        stages,
        state_dim,
        control_dim,
        kind,
    })
}

/// Voronoi piecewise-constant policy: at stage `t` the control of the
/// nearest stored state (lowest index on ties).
pub fn fit_nearest_neighbor(state_dim: usize, control_dim: usize, pairs: Vec<StagePairs>) -> Result<NearestNeighborPolicy> {
    fit_policy(&NearestNeighbor, PolicyKind::NearestNeighbor, state_dim, control_dim, pairs)
}

impl<M: StageRegression> FeedbackPolicy for RegressedPolicy<M> {
    fn horizon(&self) -> usize {
        self.stages.len()
    }
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn kind(&self) -> PolicyKind {
        self.kind
    }
    fn support_size(&self, t: usize) -> Option<usize> {
        self.stages.get(t).map(|m| m.len())
    }
    fn evaluate(&self, t: usize, x: &[f64], out: &mut [f64]) {
        self.stages[t].eval_into(x, out)
    }
}

impl NearestNeighborPolicy {
    /// Per-stage CSV: `t, x0.., u0..`, one row per stored center.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for k in 0..self.state_dim {
            let _ = write!(s, ",x{k}");
        }
        for k in 0..self.control_dim {
            let _ = write!(s, ",u{k}");
        }
        s.push('\n');
        for (t, m) in self.stages.iter().enumerate() {
            for i in 0..m.len() {
                let _ = write!(s, "{t}");
                for v in m.center(i).iter().chain(m.value(i)) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Pointwise average of `R` policies at per-stage evaluation points.
///
/// `points[t]` is a flat `P_t × n_x` array; the result `[t]` is `P_t × n_u`.
pub fn mean_policy<P: FeedbackPolicy>(policies: &[P], points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = policies.first() else {
        return Err(Error::InvalidArgument("mean_policy needs at least one policy".into()));
    };
    let (nx, nu) = (first.state_dim(), first.control_dim());
    if policies.iter().any(|p| p.state_dim() != nx || p.control_dim() != nu) {
        return Err(Error::InvalidArgument("policies disagree on dimensions".into()));
    }
    let inv = 1.0 / policies.len() as f64;
    let mut out = Vec::with_capacity(points.len());
    let mut buf = vec![0.0; nu];
    for (t, pts) in points.iter().enumerate() {
        let mut acc = vec![0.0; pts.len() / nx * nu];
        for p in policies {
            for (x, a) in pts.chunks_exact(nx).zip(acc.chunks_exact_mut(nu)) {
                p.eval_into(t, x, &mut buf)?;
                for k in 0..nu {
                    a[k] += buf[k];
                }
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
        out.push(acc);
    }
    Ok(out)
}

//! The problem class: controlled dynamics driven by independent stage noises,
//! additive stage costs and a final cost, minimised in expectation over
//! non-anticipative controls.
//!
//! Vectors are plain `f64` slices. Jacobians are written row-major into
//! caller-provided buffers so the solvers' inner loops never allocate.

use crate::error::{Error, Result};
use crate::noise::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dimensions {
    /// Number of decision stages `T`; states live on `0..=T`, controls on `0..T`.
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
}

impl Dimensions {
    pub fn new(horizon: usize, state_dim: usize, control_dim: usize, noise_dim: usize) -> Result<Self> {
        let dims = Self {
            horizon,
            state_dim,
            control_dim,
            noise_dim,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidDimensions("horizon must be >= 1".into()));
        }
        if self.state_dim == 0 || self.control_dim == 0 || self.noise_dim == 0 {
            return Err(Error::InvalidDimensions(format!(
                "all dimensions must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One instance of the stochastic optimal control problem
///
/// ```text
/// min E[ sum_{t<T} C_t(x_t, u_t) + V(x_T) ]
/// s.t. x_{t+1} = f_t(x_t, u_t, w_{t+1}),  x_0 = w_0,  u_t measurable w.r.t. (w_0..w_t)
/// ```
///
/// Implementations must be pure: equal inputs give bit-identical outputs.
pub trait ControlProblem: Send + Sync {
    fn dims(&self) -> Dimensions;

    fn noise(&self) -> &NoiseModel;

    /// `next = f_t(x, u, w)`.
    fn dynamics(&self, t: usize, x: &[f64], u: &[f64], w: &[f64], next: &mut [f64]);

    fn stage_cost(&self, t: usize, x: &[f64], u: &[f64]) -> f64;

    fn final_cost(&self, x: &[f64]) -> f64;

    /// `∂f_t/∂x`, row-major `n_x × n_x`.
    fn dynamics_dx(&self, t: usize, x: &[f64], u: &[f64], w: &[f64], jac: &mut [f64]);

    /// `∂f_t/∂u`, row-major `n_x × n_u`.
    fn dynamics_du(&self, t: usize, x: &[f64], u: &[f64], w: &[f64], jac: &mut [f64]);

    fn stage_cost_dx(&self, t: usize, x: &[f64], u: &[f64], grad: &mut [f64]);

    fn stage_cost_du(&self, t: usize, x: &[f64], u: &[f64], grad: &mut [f64]);

    fn final_cost_dx(&self, x: &[f64], grad: &mut [f64]);

    /// True when `f_t(x, u, w)` is computed exactly as `f_t(x, u, 0) + w`
    /// (componentwise, with `n_w == n_x`) and the dynamics Jacobians do not
    /// depend on `w`. Solvers use this to share work across noise samples;
    /// results then agree with the generic path up to rounding (exactly when
    /// the Jacobians are identities).
    fn additive_noise(&self) -> bool {
        false
    }
}

/// A point at which derivatives are probed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

/// Worst disagreement between one analytic derivative map and central
/// finite differences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Deviation {
    pub max_abs: f64,
    /// `max |analytic − fd| / (1 + |fd|)`.
    pub max_rel: f64,
}

impl Deviation {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let d = (analytic - numeric).abs();
        self.max_abs = self.max_abs.max(d);
        self.max_rel = self.max_rel.max(d / (1.0 + numeric.abs()));
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DerivativeReport {
    pub dynamics_dx: Deviation,
    pub dynamics_du: Deviation,
    pub stage_cost_dx: Deviation,
    pub stage_cost_du: Deviation,
    pub final_cost_dx: Deviation,
    /// Probe indices where a function value or derivative was not finite.
    pub non_finite: Vec<usize>,
}

impl DerivativeReport {
    pub fn max_abs(&self) -> f64 {
        self.maps().iter().map(|d| d.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.maps().iter().map(|d| d.max_rel).fold(0.0, f64::max)
    }

    fn maps(&self) -> [Deviation; 5] {
        [
            self.dynamics_dx,
            self.dynamics_du,
            self.stage_cost_dx,
            self.stage_cost_du,
            self.final_cost_dx,
        ]
    }
}

/// Compares every user-supplied derivative with central differences of step `h`.
pub fn check_derivatives<P: ControlProblem + ?Sized>(
    problem: &P,
    probes: &[ProbePoint],
    h: f64,
) -> Result<DerivativeReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let d = problem.dims();
    let (nx, nu, nw) = (d.state_dim, d.control_dim, d.noise_dim);
    let mut report = DerivativeReport::default();

    let mut jx = vec![0.0; nx * nx];
    let mut ju = vec![0.0; nx * nu];
    let mut gx = vec![0.0; nx];
    let mut gu = vec![0.0; nu];
    let mut fp = vec![0.0; nx];
    let mut fm = vec![0.0; nx];

    for (k, p) in probes.iter().enumerate() {
        if p.t >= d.horizon {
            return Err(Error::StageOutOfRange {
                stage: p.t,
                horizon: d.horizon,
            });
        }
        if p.x.len() != nx || p.u.len() != nu || p.w.len() != nw {
            return Err(Error::InvalidArgument(format!("probe {k} has wrong vector lengths")));
        }
        let (t, x, u, w) = (p.t, &p.x[..], &p.u[..], &p.w[..]);
        let mut finite = true;

        problem.dynamics_dx(t, x, u, w, &mut jx);
        problem.dynamics_du(t, x, u, w, &mut ju);
        problem.stage_cost_dx(t, x, u, &mut gx);
        problem.stage_cost_du(t, x, u, &mut gu);

        let mut xs = x.to_vec();
        for c in 0..nx {
            xs[c] = x[c] + h;
            problem.dynamics(t, &xs, u, w, &mut fp);
            let cp = problem.stage_cost(t, &xs, u);
            xs[c] = x[c] - h;
            problem.dynamics(t, &xs, u, w, &mut fm);
            let cm = problem.stage_cost(t, &xs, u);
            xs[c] = x[c];
            for r in 0..nx {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                finite &= fd.is_finite() && jx[r * nx + c].is_finite();
                report.dynamics_dx.record(jx[r * nx + c], fd);
            }
            let fd = (cp - cm) / (2.0 * h);
            finite &= fd.is_finite() && gx[c].is_finite();
            report.stage_cost_dx.record(gx[c], fd);
        }

        let mut us = u.to_vec();
        for c in 0..nu {
            us[c] = u[c] + h;
            problem.dynamics(t, x, &us, w, &mut fp);
            let cp = problem.stage_cost(t, x, &us);
            us[c] = u[c] - h;
            problem.dynamics(t, x, &us, w, &mut fm);
            let cm = problem.stage_cost(t, x, &us);
            us[c] = u[c];
            for r in 0..nx {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                finite &= fd.is_finite() && ju[r * nu + c].is_finite();
                report.dynamics_du.record(ju[r * nu + c], fd);
            }
            let fd = (cp - cm) / (2.0 * h);
            finite &= fd.is_finite() && gu[c].is_finite();
            report.stage_cost_du.record(gu[c], fd);
        }

        problem.final_cost_dx(x, &mut gx);
        for c in 0..nx {
            xs[c] = x[c] + h;
            let vp = problem.final_cost(&xs);
            xs[c] = x[c] - h;
            let vm = problem.final_cost(&xs);
            xs[c] = x[c];
            let fd = (vp - vm) / (2.0 * h);
            finite &= fd.is_finite() && gx[c].is_finite();
            report.final_cost_dx.record(gx[c], fd);
        }

        if !finite {
            report.non_finite.push(k);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions_reject_zero() {
        assert!(Dimensions::new(0, 1, 1, 1).is_err());
        assert!(Dimensions::new(3, 0, 1, 1).is_err());
        assert!(Dimensions::new(3, 1, 0, 1).is_err());
        assert!(Dimensions::new(3, 1, 1, 0).is_err());
        assert!(Dimensions::new(1, 1, 1, 1).is_ok());
    }
}

//! Stage-wise independent noise laws in inverse-CDF form, and scenario batches.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::problem::ControlProblem;

/// Law of one stage noise `w_t`, given as a map from the unit hypercube.
///
/// Feeding pseudo-random uniforms gives Monte Carlo draws; feeding a
/// low-discrepancy point gives quasi-Monte Carlo draws of the same law.
pub trait StageNoise: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Per-component `(lower, upper)` support bounds.
    fn support(&self) -> Vec<(f64, f64)>;

    /// Inverse CDF: `uniform ∈ [0,1]^dim` to a noise vector.
    fn from_uniform(&self, uniform: &[f64], out: &mut [f64]);
}

/// Independent uniform components on `[lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl UniformBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::InvalidArgument("uniform box needs matching non-empty bounds".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad uniform bounds {lo:?} {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// Uniform on `[-1, 1]^dim`.
    pub fn symmetric_unit(dim: usize) -> Self {
        Self {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }
}

impl StageNoise for UniformBox {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn support(&self) -> Vec<(f64, f64)> {
        self.lo.iter().copied().zip(self.hi.iter().copied()).collect()
    }

    fn from_uniform(&self, uniform: &[f64], out: &mut [f64]) {
        for k in 0..self.lo.len() {
            out[k] = self.lo[k] + (self.hi[k] - self.lo[k]) * uniform[k];
        }
    }
}

/// One law per stage `t = 0..=T`. Stages never share state, so draws for
/// distinct stages are independent by construction.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    stages: Vec<Arc<dyn StageNoise>>,
}

impl NoiseModel {
    pub fn new(stages: Vec<Arc<dyn StageNoise>>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return Err(Error::InvalidArgument("noise model needs at least one stage".into()));
        };
        let dim = first.dim();
        if dim == 0 || stages.iter().any(|s| s.dim() != dim) {
            return Err(Error::InvalidArgument("all stage noises must share one dimension".into()));
        }
        Ok(Self { stages })
    }

    /// The same law at each of the `horizon + 1` stages.
    pub fn iid(horizon: usize, law: Arc<dyn StageNoise>) -> Self {
        Self {
            stages: vec![law; horizon + 1],
        }
    }

    pub fn stage(&self, t: usize) -> &dyn StageNoise {
        self.stages[t].as_ref()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    /// Draws one stage-`t` noise with pseudo-random uniforms from `rng`.
    pub fn draw<R: Rng + ?Sized>(&self, t: usize, rng: &mut R, scratch: &mut [f64], out: &mut [f64]) {
        for s in scratch.iter_mut() {
            *s = rng.random::<f64>();
        }
        self.stages[t].from_uniform(scratch, out);
    }
}

/// `N` scenarios, each a `(T+1) × n_w` matrix; row `t` is `w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    count: usize,
    stages: usize,
    noise_dim: usize,
    values: Vec<f64>,
}

impl ScenarioBatch {
    pub fn from_values(count: usize, stages: usize, noise_dim: usize, values: Vec<f64>) -> Result<Self> {
        let expected = count * stages * noise_dim;
        if values.len() != expected {
            return Err(Error::Shape {
                what: "scenario batch",
                expected,
                got: values.len(),
            });
        }
        if count == 0 {
            return Err(Error::InvalidArgument("scenario batch must hold at least one scenario".into()));
        }
        Ok(Self {
            count,
            stages,
            noise_dim,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `T + 1`.
    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `w_t` of scenario `i`.
    #[inline]
    pub fn noise(&self, i: usize, t: usize) -> &[f64] {
        let start = (i * self.stages + t) * self.noise_dim;
        &self.values[start..start + self.noise_dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same scenarios, reindexed so that new scenario `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let block = self.stages * self.noise_dim;
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(&self.values[p * block..(p + 1) * block]);
        }
        Self { values, ..*self }
    }
}

/// Draws `n` independent scenarios from the problem's noise model.
pub fn sample_scenarios<P, R>(problem: &P, n: usize, stream: &mut R) -> Result<ScenarioBatch>
where
    P: ControlProblem + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one scenario".into()));
    }
    let noise = problem.noise();
    let dims = problem.dims();
    let stages = dims.horizon + 1;
    if noise.num_stages() != stages || noise.dim() != dims.noise_dim {
        return Err(Error::InvalidArgument("noise model does not match problem dimensions".into()));
    }
    let nw = dims.noise_dim;
    let mut values = vec![0.0; n * stages * nw];
    let mut scratch = vec![0.0; nw];
    for (k, w) in values.chunks_exact_mut(nw).enumerate() {
        noise.draw(k % stages, stream, &mut scratch, w);
    }
    ScenarioBatch::from_values(n, stages, nw, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_is_affine() {
        let law = UniformBox::symmetric_unit(1);
        let mut out = [0.0];
        for &u in &[0.0, 0.25, 0.5, 0.9, 1.0] {
            law.from_uniform(&[u], &mut out);
            assert_eq!(out[0], 2.0 * u - 1.0);
        }
    }

    #[test]
    fn uniform_box_rejects_bad_bounds() {
        assert!(UniformBox::new(vec![1.0], vec![0.0]).is_err());
        assert!(UniformBox::new(vec![], vec![]).is_err());
        assert!(UniformBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn mixed_stage_dimensions_rejected() {
        let a: Arc<dyn StageNoise> = Arc::new(UniformBox::symmetric_unit(1));
        let b: Arc<dyn StageNoise> = Arc::new(UniformBox::symmetric_unit(2));
        assert!(NoiseModel::new(vec![a, b]).is_err());
    }

    #[test]
    fn permutation_reorders_blocks() {
        let batch = ScenarioBatch::from_values(3, 2, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = batch.permuted(&[2, 0, 1]);
        assert_eq!(p.noise(0, 1), &[5.0]);
        assert_eq!(p.noise(1, 0), &[0.0]);
        assert_eq!(p.noise(2, 0), &[2.0]);
    }
}

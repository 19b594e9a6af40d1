//! Sample-based methods for discrete-time stochastic optimal control.
//!
//! Two approximation schemes are implemented side by side on the same
//! problem description ([`ControlProblem`]):
//!
//! * [`tree`]: scenario trees built by conditional sampling, solved on the
//!   tree, then turned into a feedback strategy by nearest-neighbour
//!   interpolation of the node `(state, control)` pairs;
//! * [`particle`]: the particle method, a gradient iteration on sampled
//!   optimality conditions whose adjoint conditional expectations go through
//!   a regression operator.
//!
//! [`evaluation`] measures either strategy against a closed-form optimum
//! ([`lq`]) through the mean squared error and its squared-bias/variance
//! split, and [`experiment`] drives the convergence studies.

pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod lq;
pub mod noise;
pub mod particle;
pub mod policy;
pub mod problem;
pub mod qmc;
pub mod regression;
pub mod seed;
pub mod tree;

pub use error::{Error, Result};
pub use noise::{sample_scenarios, NoiseModel, ScenarioBatch, StageNoise, UniformBox};
pub use policy::{FeedbackPolicy, PolicyKind};
pub use problem::{check_derivatives, ControlProblem, Dimensions, ProbePoint};
pub use seed::{Purpose, SeedPlan, Stream};

//! Simulation, variational smoothing and variational-EM learning for hybrid
//! processes: a Markov jump process over a finite set of modes switching the
//! drift and dispersion of a linear stochastic differential equation,
//! observed at discrete times through Gaussian noise.
//!
//! The smoother approximates the posterior with a time-indexed mixture of
//! Gaussians, `q(y, z, t) = q_Z(z, t) N(y | μ(z, t), Σ(z, t))`, driven by
//! piecewise-constant variational controls on a uniform grid. Gradients are
//! exact for the discretized objective (adjoint of the fixed-step RK4
//! propagation), so finite-difference checks hold to round-off.

pub mod error;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod modelfile;
pub mod oracle;
pub mod simulate;
pub mod smoother;
pub mod stats;

pub use error::{Error, Result};
pub use model::{
    snap_observations, validate_model, HybridModel, InitialLaw, LinearDrift, ObservationSet, RateMatrix, TimeGrid,
    ValidationReport,
};

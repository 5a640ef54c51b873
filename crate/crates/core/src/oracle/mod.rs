//! Reference solutions: closed-form OU moments, the exact single-mode
//! Gaussian smoother, and a finite-volume solver for the hybrid
//! Fokker–Planck/master equation on a 1D grid.

mod compare;
mod gfpe;
mod kalman;
mod ou;

pub use compare::{compare_marginals, ComparisonReport, MarginalSummary};
pub use gfpe::{gfpe_filter, gfpe_smoother, stable_substeps, FilterOutput, GridDensity, SmootherOutput, YGrid};
pub use kalman::{exact_transition, gaussian_smoother_1mode, ExactTransition, GaussianSmoothing};
pub use ou::ou_exact_moments;

//! Variational controls, marginals and multipliers in flat storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HybridModel, TimeGrid, SIMPLEX_TOL};

/// Piecewise-constant variational controls and initial conditions.
///
/// Interval `i` covers `[t_i, t_{i+1})`. Layouts are row-major:
/// `a[i][z][n*n]`, `b[i][z][n]`, `rates[i][z][z']` (diagonal = -row sum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalControls {
    pub modes: usize,
    pub dim: usize,
    pub intervals: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub rates: Vec<f64>,
    pub q0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl VariationalControls {
    /// Controls reproducing the prior: `A = A_p`, `b = b_p`, `Λ̃ = Λ`, and
    /// the prior initial law.
    pub fn from_prior(model: &HybridModel, grid: &TimeGrid) -> Self {
        let (k, n, m) = (model.num_modes(), model.state_dim, grid.intervals());
        let mut a = Vec::with_capacity(m * k * n * n);
        let mut b = Vec::with_capacity(m * k * n);
        let mut rates = Vec::with_capacity(m * k * k);
        for _ in 0..m {
            for d in &model.drift {
                a.extend_from_slice(&d.a);
                b.extend_from_slice(&d.b);
            }
            rates.extend_from_slice(model.rates.as_slice());
        }
        Self {
            modes: k,
            dim: n,
            intervals: m,
            a,
            b,
            rates,
            q0: model.initial.p0.clone(),
            mu0: model.initial.mean.concat(),
            sigma0: model.initial.cov.concat(),
        }
    }

    #[inline]
    pub fn a(&self, interval: usize, z: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        let o = (interval * self.modes + z) * nn;
        &self.a[o..o + nn]
    }

    #[inline]
    pub fn b(&self, interval: usize, z: usize) -> &[f64] {
        let o = (interval * self.modes + z) * self.dim;
        &self.b[o..o + self.dim]
    }

    /// Rate block of one interval, `K x K` with diagonal.
    #[inline]
    pub fn rate_block(&self, interval: usize) -> &[f64] {
        let kk = self.modes * self.modes;
        &self.rates[interval * kk..(interval + 1) * kk]
    }

    #[inline]
    pub fn rate(&self, interval: usize, from: usize, to: usize) -> f64 {
        self.rates[(interval * self.modes + from) * self.modes + to]
    }

    pub fn mu0(&self, z: usize) -> &[f64] {
        &self.mu0[z * self.dim..(z + 1) * self.dim]
    }

    pub fn sigma0(&self, z: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        &self.sigma0[z * nn..(z + 1) * nn]
    }

    /// Floors off-diagonal rates and rebuilds every diagonal.
    pub fn normalize_rates(&mut self, floor: f64) {
        let k = self.modes;
        for block in self.rates.chunks_mut(k * k) {
            for i in 0..k {
                let mut exit = 0.0;
                for j in 0..k {
                    if i != j {
                        let v = &mut block[i * k + j];
                        if !(*v >= floor) {
                            *v = floor;
                        }
                        exit += *v;
                    }
                }
                block[i * k + i] = -exit;
            }
        }
    }

    /// Checks the control invariants.
    pub fn validate(&self, rate_floor: f64) -> Result<()> {
        let (k, n) = (self.modes, self.dim);
        if self.a.len() != self.intervals * k * n * n
            || self.b.len() != self.intervals * k * n
            || self.rates.len() != self.intervals * k * k
            || self.q0.len() != k
            || self.mu0.len() != k * n
            || self.sigma0.len() != k * n * n
        {
            return Err(Error::Dimension("control arrays have inconsistent sizes".into()));
        }
        for block in self.rates.chunks(k * k) {
            for i in 0..k {
                let mut row = 0.0;
                for j in 0..k {
                    let v = block[i * k + j];
                    if i != j && !(v >= rate_floor * (1.0 - 1e-12)) {
                        return Err(Error::InvalidModel(format!("variational rate {v} below the floor")));
                    }
                    row += v;
                }
                if row.abs() > 1e-9 * (1.0 + block[i * k + i].abs()) {
                    return Err(Error::InvalidModel("variational rate row does not sum to 0".into()));
                }
            }
        }
        let s: f64 = self.q0.iter().sum();
        if self.q0.iter().any(|&q| q < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel("initial mode distribution is not on the simplex".into()));
        }
        for z in 0..k {
            if linalg::cholesky(self.sigma0(z), n).is_none() {
                return Err(Error::CovarianceNotPd {
                    node: 0,
                    mode: z,
                    min_eig: linalg::min_eig_sym(self.sigma0(z), n),
                });
            }
        }
        Ok(())
    }
}

/// Mixture-of-Gaussians marginals on grid nodes: `q[node][z]`,
/// `mu[node][z][n]`, `sigma[node][z][n*n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalMarginals {
    pub modes: usize,
    pub dim: usize,
    pub nodes: usize,
    pub q: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl VariationalMarginals {
    #[inline]
    pub fn q(&self, node: usize) -> &[f64] {
        &self.q[node * self.modes..(node + 1) * self.modes]
    }

    #[inline]
    pub fn mu(&self, node: usize, z: usize) -> &[f64] {
        let o = (node * self.modes + z) * self.dim;
        &self.mu[o..o + self.dim]
    }

    #[inline]
    pub fn sigma(&self, node: usize, z: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        let o = (node * self.modes + z) * nn;
        &self.sigma[o..o + nn]
    }

    /// Mixture mean `Σ_z q_Z(z) μ(z)` at a node.
    pub fn mixture_mean(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (z, &w) in self.q(node).iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.mu(node, z)) {
                *o += w * m;
            }
        }
        out
    }

    /// Mixture covariance at a node (law of total variance).
    pub fn mixture_cov(&self, node: usize) -> Vec<f64> {
        let n = self.dim;
        let mean = self.mixture_mean(node);
        let mut out = vec![0.0; n * n];
        for (z, &w) in self.q(node).iter().enumerate() {
            let mu = self.mu(node, z);
            let s = self.sigma(node, z);
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += w * (s[i * n + j] + (mu[i] - mean[i]) * (mu[j] - mean[j]));
                }
            }
        }
        out
    }

    /// Largest deviation of `Σ_z q_Z(z)` from one over all nodes.
    pub fn normalization_error(&self) -> f64 {
        self.q
            .chunks(self.modes)
            .map(|q| (q.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all `Σ(z, t_k)`.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        let nn = self.dim * self.dim;
        self.sigma
            .chunks(nn)
            .map(|s| linalg::min_eig_sym(s, self.dim))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization_error() <= 1e-8 && self.q.iter().all(|&v| v >= -SIMPLEX_TOL)
    }
}

/// Lagrange multipliers on nodes, right limits at observation nodes
/// (the value just after the observation in forward time), with the same
/// layout as [`VariationalMarginals`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub modes: usize,
    pub dim: usize,
    pub nodes: usize,
    pub nu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub psi: Vec<f64>,
}

impl Multipliers {
    pub fn nu(&self, node: usize) -> &[f64] {
        &self.nu[node * self.modes..(node + 1) * self.modes]
    }

    pub fn lambda(&self, node: usize, z: usize) -> &[f64] {
        let o = (node * self.modes + z) * self.dim;
        &self.lambda[o..o + self.dim]
    }

    pub fn psi(&self, node: usize, z: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        let o = (node * self.modes + z) * nn;
        &self.psi[o..o + nn]
    }

    pub fn max_abs(&self) -> f64 {
        self.nu
            .iter()
            .chain(&self.lambda)
            .chain(&self.psi)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Ascent gradients of the objective with respect to the per-interval
/// controls, laid out like [`VariationalControls`]. Rate gradients are
/// given for off-diagonal entries; the diagonal slots hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGradients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ControlGradients {
    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.rates)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Ascent gradients for the variational initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGradients {
    /// Per-mode gradient in `μ⁰(z)`.
    pub mu0: Vec<f64>,
    /// Per-mode gradient in the factor `C(z)` of `Σ⁰(z) = C Cᵀ`.
    pub chol0: Vec<f64>,
    /// Per-mode gradient in `Σ⁰(z)` treated as a free symmetric matrix.
    pub sigma0: Vec<f64>,
    /// Full-coordinate gradient in `q_Z⁰`.
    pub q0: Vec<f64>,
    /// Reduced-coordinate gradient in `q_1..q_{K-1}` with
    /// `q_K = 1 - Σ q_z`.
    pub q0_reduced: Vec<f64>,
    /// Whether a log was clamped at the probability floor.
    pub floored: bool,
}

impl InitialGradients {
    pub fn max_abs(&self) -> f64 {
        self.mu0
            .iter()
            .chain(&self.chol0)
            .chain(&self.q0_reduced)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

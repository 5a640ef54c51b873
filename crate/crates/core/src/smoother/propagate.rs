//! Fixed-step RK4 for the constraint equations and its exact reverse-mode
//! derivative.
//!
//! All three constraint systems are linear in their state with the control
//! held fixed over an interval:
//!
//! * master equation `q̇ = Λ̃ᵀ q`,
//! * mean `μ̇ = A μ + b`,
//! * covariance `Σ̇ = A Σ + Σ Aᵀ + D`.
//!
//! [`rk4_adjoint`] pulls a cotangent of the end state back through one RK4
//! step, producing the cotangent of the start state and accumulating the
//! cotangent of the control. Stage states are recomputed rather than stored.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HybridModel, TimeGrid};

use super::controls::{VariationalControls, VariationalMarginals};

/// A linear ODE `ẋ = F(x)` with a fixed control.
pub(crate) trait LinearSystem {
    fn len(&self) -> usize;
    fn rhs(&self, x: &[f64], out: &mut [f64]);
    /// `out = (∂F/∂x)ᵀ w`
    fn adj_state(&self, w: &[f64], out: &mut [f64]);
    /// Accumulates `(∂F/∂u)ᵀ w` at state `x` into the system's control
    /// cotangent.
    fn adj_control(&mut self, x: &[f64], w: &[f64]);
}

/// Scratch space for RK4 on systems of length up to `len`.
pub(crate) struct Rk4Scratch {
    k: [Vec<f64>; 4],
    s: [Vec<f64>; 4],
    kb: Vec<f64>,
    sb: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(len: usize) -> Self {
        let v = || vec![0.0; len];
        Self {
            k: [v(), v(), v(), v()],
            s: [v(), v(), v(), v()],
            kb: v(),
            sb: v(),
            tmp: v(),
        }
    }
}

fn stages<S: LinearSystem>(sys: &S, x: &[f64], h: f64, sc: &mut Rk4Scratch) {
    let n = sys.len();
    let [k1, k2, k3, k4] = &mut sc.k;
    let [s0, s1, s2, s3] = &mut sc.s;
    s0[..n].copy_from_slice(x);
    sys.rhs(&s0[..n], &mut k1[..n]);
    for i in 0..n {
        s1[i] = x[i] + 0.5 * h * k1[i];
    }
    sys.rhs(&s1[..n], &mut k2[..n]);
    for i in 0..n {
        s2[i] = x[i] + 0.5 * h * k2[i];
    }
    sys.rhs(&s2[..n], &mut k3[..n]);
    for i in 0..n {
        s3[i] = x[i] + h * k3[i];
    }
    sys.rhs(&s3[..n], &mut k4[..n]);
}

/// One RK4 step, `out = Φ(x)`.
pub(crate) fn rk4_step<S: LinearSystem>(sys: &S, x: &[f64], h: f64, out: &mut [f64], sc: &mut Rk4Scratch) {
    stages(sys, x, h, sc);
    let [k1, k2, k3, k4] = &sc.k;
    for i in 0..sys.len() {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Reverse-mode derivative of one RK4 step: given `w = ∂J/∂Φ(x)`, writes
/// `∂J/∂x` to `xbar` and accumulates the control cotangent in `sys`.
pub(crate) fn rk4_adjoint<S: LinearSystem>(sys: &mut S, x: &[f64], h: f64, w: &[f64], xbar: &mut [f64], sc: &mut Rk4Scratch) {
    let n = sys.len();
    stages(sys, x, h, sc);
    xbar[..n].copy_from_slice(w);
    let Rk4Scratch { s, kb, sb, tmp, .. } = sc;
    // stage 4: k4 = F(s3), s3 = x + h k3
    for i in 0..n {
        kb[i] = h / 6.0 * w[i];
    }
    sys.adj_control(&s[3][..n], &kb[..n]);
    sys.adj_state(&kb[..n], &mut sb[..n]);
    for i in 0..n {
        xbar[i] += sb[i];
        kb[i] = h / 3.0 * w[i] + h * sb[i];
    }
    // stage 3: k3 = F(s2), s2 = x + h/2 k2
    sys.adj_control(&s[2][..n], &kb[..n]);
    sys.adj_state(&kb[..n], &mut sb[..n]);
    for i in 0..n {
        xbar[i] += sb[i];
        kb[i] = h / 3.0 * w[i] + 0.5 * h * sb[i];
    }
    // stage 2: k2 = F(s1), s1 = x + h/2 k1
    sys.adj_control(&s[1][..n], &kb[..n]);
    sys.adj_state(&kb[..n], &mut sb[..n]);
    for i in 0..n {
        xbar[i] += sb[i];
        kb[i] = h / 6.0 * w[i] + 0.5 * h * sb[i];
    }
    // stage 1: k1 = F(x)
    sys.adj_control(&s[0][..n], &kb[..n]);
    sys.adj_state(&kb[..n], &mut tmp[..n]);
    for i in 0..n {
        xbar[i] += tmp[i];
    }
}

/// Master equation with rate block `r` (`K x K`, diagonal included).
pub(crate) struct Master<'a> {
    pub k: usize,
    pub r: &'a [f64],
    /// Cotangent of the off-diagonal rates, `K x K`.
    pub grad: Vec<f64>,
}

impl LinearSystem for Master<'_> {
    fn len(&self) -> usize {
        self.k
    }

    fn rhs(&self, q: &[f64], out: &mut [f64]) {
        let k = self.k;
        for j in 0..k {
            let mut s = 0.0;
            for i in 0..k {
                s += q[i] * self.r[i * k + j];
            }
            out[j] = s;
        }
    }

    fn adj_state(&self, w: &[f64], out: &mut [f64]) {
        linalg::mat_vec(self.r, w, self.k, out);
    }

    fn adj_control(&mut self, q: &[f64], w: &[f64]) {
        let k = self.k;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    self.grad[a * k + b] += q[a] * (w[b] - w[a]);
                }
            }
        }
    }
}

/// Mean equation of one mode.
pub(crate) struct Mean<'a> {
    pub n: usize,
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl LinearSystem for Mean<'_> {
    fn len(&self) -> usize {
        self.n
    }

    fn rhs(&self, mu: &[f64], out: &mut [f64]) {
        linalg::mat_vec(self.a, mu, self.n, out);
        for (o, b) in out.iter_mut().zip(self.b) {
            *o += b;
        }
    }

    fn adj_state(&self, w: &[f64], out: &mut [f64]) {
        linalg::mat_t_vec(self.a, w, self.n, out);
    }

    fn adj_control(&mut self, mu: &[f64], w: &[f64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                self.grad_a[i * n + j] += w[i] * mu[j];
            }
            self.grad_b[i] += w[i];
        }
    }
}

/// Covariance equation of one mode.
pub(crate) struct Cov<'a> {
    pub n: usize,
    pub a: &'a [f64],
    pub d: &'a [f64],
    pub grad_a: Vec<f64>,
    pub grad_d: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Cov<'a> {
    pub fn new(n: usize, a: &'a [f64], d: &'a [f64]) -> Self {
        Self {
            n,
            a,
            d,
            grad_a: vec![0.0; n * n],
            grad_d: vec![0.0; n * n],
            tmp: vec![0.0; n * n],
        }
    }
}

impl LinearSystem for Cov<'_> {
    fn len(&self) -> usize {
        self.n * self.n
    }

    fn rhs(&self, s: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let mut v = self.d[i * n + j];
                for k in 0..n {
                    v += self.a[i * n + k] * s[k * n + j] + s[i * n + k] * self.a[j * n + k];
                }
                out[i * n + j] = v;
            }
        }
    }

    fn adj_state(&self, w: &[f64], out: &mut [f64]) {
        // Aᵀ W + W A
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for k in 0..n {
                    v += self.a[k * n + i] * w[k * n + j] + w[i * n + k] * self.a[k * n + j];
                }
                out[i * n + j] = v;
            }
        }
    }

    fn adj_control(&mut self, s: &[f64], w: &[f64]) {
        // ∂A: W Sᵀ + Wᵀ S, ∂D: W
        let n = self.n;
        linalg::mul_nt(w, s, n, &mut self.tmp);
        for (g, t) in self.grad_a.iter_mut().zip(&self.tmp) {
            *g += t;
        }
        linalg::mul_tn(w, s, n, &mut self.tmp);
        for (g, t) in self.grad_a.iter_mut().zip(&self.tmp) {
            *g += t;
        }
        for (g, v) in self.grad_d.iter_mut().zip(w) {
            *g += v;
        }
    }
}

/// Integrates the master equation from `q_Z⁰`, renormalizing onto the
/// simplex after each step. Returns `q[node][z]`.
pub fn propagate_master(controls: &VariationalControls, grid: &TimeGrid) -> Result<Vec<f64>> {
    let k = controls.modes;
    let h = grid.step();
    let mut q = Vec::with_capacity(grid.nodes() * k);
    q.extend_from_slice(&controls.q0);
    let mut sc = Rk4Scratch::new(k);
    let mut next = vec![0.0; k];
    for i in 0..grid.intervals() {
        let sys = Master {
            k,
            r: controls.rate_block(i),
            grad: Vec::new(),
        };
        rk4_step(&sys, &q[i * k..(i + 1) * k], h, &mut next, &mut sc);
        let mut total = 0.0;
        for v in next.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "mode probabilities",
                    node: i + 1,
                });
            }
            if *v < -1e-8 {
                return Err(Error::NegativeProbability {
                    node: i + 1,
                    value: *v,
                });
            }
            *v = v.max(0.0);
            total += *v;
        }
        for v in next.iter_mut() {
            *v /= total;
        }
        q.extend_from_slice(&next);
    }
    Ok(q)
}

/// Integrates the per-mode mean and covariance equations. Returns
/// `(mu[node][z][n], sigma[node][z][n*n])`.
pub fn propagate_moments(
    controls: &VariationalControls,
    dispersion: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (k, n) = (controls.modes, controls.dim);
    let nn = n * n;
    let h = grid.step();
    let nodes = grid.nodes();
    let mut mu = vec![0.0; nodes * k * n];
    let mut sigma = vec![0.0; nodes * k * nn];
    mu[..k * n].copy_from_slice(&controls.mu0);
    sigma[..k * nn].copy_from_slice(&controls.sigma0);
    let mut sc_mu = Rk4Scratch::new(n);
    let mut sc_sig = Rk4Scratch::new(nn);
    for z in 0..k {
        for i in 0..grid.intervals() {
            let a = controls.a(i, z);
            let mean = Mean {
                n,
                a,
                b: controls.b(i, z),
                grad_a: Vec::new(),
                grad_b: Vec::new(),
            };
            let (cur, next) = mu.split_at_mut(((i + 1) * k + z) * n);
            let from = &cur[(i * k + z) * n..(i * k + z + 1) * n];
            rk4_step(&mean, from, h, &mut next[..n], &mut sc_mu);

            let cov = Cov::new(n, a, &dispersion[z]);
            let (cur, next) = sigma.split_at_mut(((i + 1) * k + z) * nn);
            let from = &cur[(i * k + z) * nn..(i * k + z + 1) * nn];
            let out = &mut next[..nn];
            rk4_step(&cov, from, h, out, &mut sc_sig);
            linalg::symmetrize(out, n);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "covariance",
                    node: i + 1,
                });
            }
            let min_eig = linalg::min_eig_sym(out, n);
            if !(min_eig >= 1e-12) {
                return Err(Error::CovarianceNotPd {
                    node: i + 1,
                    mode: z,
                    min_eig,
                });
            }
        }
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "mean", node: 0 });
    }
    Ok((mu, sigma))
}

/// Forward sweep of all constraint equations.
pub fn propagate(controls: &VariationalControls, model: &HybridModel, grid: &TimeGrid) -> Result<VariationalMarginals> {
    if controls.intervals != grid.intervals() {
        return Err(Error::Dimension(format!(
            "controls cover {} intervals, grid has {}",
            controls.intervals,
            grid.intervals()
        )));
    }
    let q = propagate_master(controls, grid)?;
    let (mu, sigma) = propagate_moments(controls, &model.dispersion, grid)?;
    Ok(VariationalMarginals {
        modes: controls.modes,
        dim: controls.dim,
        nodes: grid.nodes(),
        q,
        mu,
        sigma,
    })
}

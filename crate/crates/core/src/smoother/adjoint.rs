//! Backward sweep: multipliers and exact gradients of the discretized
//! objective.
//!
//! Let `G_k` be the derivative of the objective with respect to the node
//! state `x_k`, holding earlier states fixed. Then
//!
//! ```text
//! G_k = P_k + ∂obs_k + (-h/2) ∂_x c(x_k, u_{k-1})
//! P_k = (∂Φ_k/∂x)ᵀ G_{k+1} + (-h/2) ∂_x c(x_k, u_k),      P_M = 0
//! ```
//!
//! `P_k` collects everything strictly after `t_k`; the multipliers are
//! `(ν, λ, Ψ) = -P_k`, so they vanish at `T` and jump by the observation
//! resets when crossing an observation node backward in time.

use crate::error::{Error, Result};
use crate::linalg;

use super::controls::{ControlGradients, InitialGradients, Multipliers, VariationalControls, VariationalMarginals};
use super::objective::{Local, Problem};
use super::propagate::{rk4_adjoint, Cov, Master, Mean, Rk4Scratch};

/// Output of one backward sweep.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub multipliers: Multipliers,
    pub controls: ControlGradients,
    /// Derivative in each mode's dispersion `D(z)` (full matrix entries).
    pub dispersion: Vec<Vec<f64>>,
    /// `G_0`, the derivative in the initial node state.
    pub state0_q: Vec<f64>,
    pub state0_mu: Vec<f64>,
    pub state0_sigma: Vec<f64>,
}

/// State cotangent buffers.
struct StateVec {
    q: Vec<f64>,
    mu: Vec<f64>,
    sig: Vec<f64>,
}

impl StateVec {
    fn zeros(k: usize, n: usize) -> Self {
        Self {
            q: vec![0.0; k],
            mu: vec![0.0; k * n],
            sig: vec![0.0; k * n * n],
        }
    }

    fn add_local(&mut self, local: &Local, w: f64) {
        for (g, v) in self.q.iter_mut().zip(&local.dq) {
            *g += w * v;
        }
        for (g, v) in self.mu.iter_mut().zip(&local.dmu) {
            *g += w * v;
        }
        for (g, v) in self.sig.iter_mut().zip(&local.dsig) {
            *g += w * v;
        }
    }
}

impl Problem<'_> {
    /// Adds the observation-term derivative at `node`, if observed.
    fn add_observation(&self, marg: &VariationalMarginals, node: usize, g: &mut StateVec, resid: &mut [f64]) {
        let Some(i) = self.obs_at[node] else { return };
        let (k, n) = (self.modes(), self.dim());
        let nn = n * n;
        let x = &self.obs.values()[i];
        for z in 0..k {
            let q = marg.q(node)[z];
            let mu = marg.mu(node, z);
            g.q[z] += self.expected_loglik(x, mu, marg.sigma(node, z), resid);
            // resid = x - μ after the call
            for r in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    s += self.obs_inv[r * n + c] * resid[c];
                }
                g.mu[z * n + r] += q * s;
            }
            for e in 0..nn {
                g.sig[z * nn + e] -= 0.5 * q * self.obs_inv[e];
            }
        }
    }

    /// Runs the backward sweep.
    pub fn sensitivities(&self, c: &VariationalControls, marg: &VariationalMarginals) -> Result<Sensitivities> {
        let (k, n) = (self.modes(), self.dim());
        let nn = n * n;
        let m = self.grid.intervals();
        let nodes = self.grid.nodes();
        let h = self.grid.step();
        let half = -0.5 * h;

        let mut mult = Multipliers {
            modes: k,
            dim: n,
            nodes,
            nu: vec![0.0; nodes * k],
            lambda: vec![0.0; nodes * k * n],
            psi: vec![0.0; nodes * k * nn],
        };
        let mut grads = ControlGradients {
            a: vec![0.0; m * k * nn],
            b: vec![0.0; m * k * n],
            rates: vec![0.0; m * k * k],
        };
        let mut grad_d = vec![vec![0.0; nn]; k];

        let mut left = Local::new(k, n);
        let mut right = Local::new(k, n);
        let mut resid = vec![0.0; n];
        let mut sc_q = Rk4Scratch::new(k);
        let mut sc_mu = Rk4Scratch::new(n);
        let mut sc_sig = Rk4Scratch::new(nn);

        // G at the last node
        let mut g = StateVec::zeros(k, n);
        right.eval(self, c, m - 1, marg, m, true);
        g.add_local(&right, half);
        self.add_observation(marg, m, &mut g, &mut resid);

        let mut p = StateVec::zeros(k, n);
        for i in (0..m).rev() {
            // control cotangents through the step
            let mut master = Master {
                k,
                r: c.rate_block(i),
                grad: vec![0.0; k * k],
            };
            rk4_adjoint(&mut master, marg.q(i), h, &g.q, &mut p.q, &mut sc_q);
            let gr = &mut grads.rates[i * k * k..(i + 1) * k * k];
            gr.copy_from_slice(&master.grad);

            for z in 0..k {
                let a = c.a(i, z);
                let mut mean = Mean {
                    n,
                    a,
                    b: c.b(i, z),
                    grad_a: vec![0.0; nn],
                    grad_b: vec![0.0; n],
                };
                rk4_adjoint(
                    &mut mean,
                    marg.mu(i, z),
                    h,
                    &g.mu[z * n..(z + 1) * n],
                    &mut p.mu[z * n..(z + 1) * n],
                    &mut sc_mu,
                );
                let mut cov = Cov::new(n, a, &self.model.dispersion[z]);
                rk4_adjoint(
                    &mut cov,
                    marg.sigma(i, z),
                    h,
                    &g.sig[z * nn..(z + 1) * nn],
                    &mut p.sig[z * nn..(z + 1) * nn],
                    &mut sc_sig,
                );
                let o = (i * k + z) * nn;
                for e in 0..nn {
                    grads.a[o + e] = mean.grad_a[e] + cov.grad_a[e];
                    grad_d[z][e] += cov.grad_d[e];
                }
                let o = (i * k + z) * n;
                grads.b[o..o + n].copy_from_slice(&mean.grad_b);
            }

            // running cost at both ends of interval i
            left.eval(self, c, i, marg, i, true);
            for side in [&left, &right] {
                for e in 0..k * nn {
                    grads.a[i * k * nn + e] += half * side.da[e];
                }
                for e in 0..k * n {
                    grads.b[i * k * n + e] += half * side.db[e];
                }
                for a in 0..k {
                    for b in 0..k {
                        if a != b {
                            gr_add(&mut grads.rates, i, k, a, b, half * side.drate[a * k + b]);
                        }
                    }
                }
                for z in 0..k {
                    for e in 0..nn {
                        grad_d[z][e] += half * side.dd[z * nn + e];
                    }
                }
            }
            p.add_local(&left, half);

            // multipliers are -P (right limits)
            for (d, s) in mult.nu[i * k..(i + 1) * k].iter_mut().zip(&p.q) {
                *d = -s;
            }
            for (d, s) in mult.lambda[i * k * n..(i + 1) * k * n].iter_mut().zip(&p.mu) {
                *d = -s;
            }
            for (d, s) in mult.psi[i * k * nn..(i + 1) * k * nn].iter_mut().zip(&p.sig) {
                *d = -s;
            }
            if p.q.iter().chain(&p.mu).chain(&p.sig).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "multipliers",
                    node: i,
                });
            }

            // G_i
            g.q.copy_from_slice(&p.q);
            g.mu.copy_from_slice(&p.mu);
            g.sig.copy_from_slice(&p.sig);
            if i > 0 {
                right.eval(self, c, i - 1, marg, i, true);
                g.add_local(&right, half);
                self.add_observation(marg, i, &mut g, &mut resid);
            }
        }

        Ok(Sensitivities {
            multipliers: mult,
            controls: grads,
            dispersion: grad_d,
            state0_q: g.q,
            state0_mu: g.mu,
            state0_sigma: g.sig,
        })
    }

    /// Ascent gradients for the variational initial conditions, from the
    /// initial-node cotangent and the initial KL.
    pub fn initial_gradients(&self, c: &VariationalControls, sens: &Sensitivities) -> Result<InitialGradients> {
        let (k, n) = (self.modes(), self.dim());
        let nn = n * n;
        let init = &self.model.initial;
        let mut floored = false;
        let mut g_q = sens.state0_q.clone();
        let mut g_mu = sens.state0_mu.clone();
        let mut g_sig = sens.state0_sigma.clone();
        let mut chol0 = vec![0.0; k * nn];
        for z in 0..k {
            let q = c.q0[z];
            let p = init.p0[z];
            if q < self.q_floor || p < self.q_floor {
                floored = true;
            }
            let kl = self.gaussian_initial_kl(z, c.mu0(z), c.sigma0(z))?;
            g_q[z] -= (q.max(self.q_floor) / p.max(self.q_floor)).ln() + 1.0 + kl;

            let inv = &self.init_inv[z];
            let mu0 = c.mu0(z);
            for r in 0..n {
                let mut s = 0.0;
                for cc in 0..n {
                    s += inv[r * n + cc] * (mu0[cc] - init.mean[z][cc]);
                }
                g_mu[z * n + r] -= q * s;
            }

            let sigma0 = c.sigma0(z);
            let (s0inv, _) = linalg::spd_inverse_logdet(sigma0, n).ok_or(Error::CovarianceNotPd {
                node: 0,
                mode: z,
                min_eig: linalg::min_eig_sym(sigma0, n),
            })?;
            let gs = &mut g_sig[z * nn..(z + 1) * nn];
            for e in 0..nn {
                gs[e] -= 0.5 * q * (inv[e] - s0inv[e]);
            }
            // Σ⁰ = C Cᵀ: ∂C = (G + Gᵀ) C, lower triangle
            let cf = linalg::cholesky(sigma0, n).expect("checked above");
            let mut sym = gs.to_vec();
            for r in 0..n {
                for s in 0..n {
                    sym[r * n + s] = gs[r * n + s] + gs[s * n + r];
                }
            }
            let mut gc = vec![0.0; nn];
            linalg::mul(&sym, &cf, n, &mut gc);
            for r in 0..n {
                for s in 0..=r {
                    chol0[z * nn + r * n + s] = gc[r * n + s];
                }
            }
        }
        let q0_reduced = (0..k.saturating_sub(1)).map(|z| g_q[z] - g_q[k - 1]).collect();
        Ok(InitialGradients {
            mu0: g_mu,
            chol0,
            sigma0: g_sig,
            q0: g_q,
            q0_reduced,
            floored,
        })
    }
}

#[inline]
fn gr_add(rates: &mut [f64], i: usize, k: usize, a: usize, b: usize, v: f64) {
    rates[(i * k + a) * k + b] += v;
}

//! The discretized evidence lower bound and its local derivatives.
//!
//! With node states `x_k = (q_Z, μ, Σ)(t_k)` and interval controls `u_k`,
//!
//! ```text
//! ELBO = Σ_i Σ_z q_Z(z, t_i) E[ln p(x_i | y) | z]
//!      - Σ_k h/2 [c(x_k, u_k) + c(x_{k+1}, u_k)]
//!      - KL(initial)
//! c(x, u) = Σ_z q_Z(z) (½ m_z + j_z)
//! m_z = tr(Āᵀ D⁻¹ Ā Σ) + vᵀ D⁻¹ v,   v = Ā μ + b̄,  Ā = A - A_p, b̄ = b - b_p
//! j_z = Σ_{z'≠z} Λ̃ ln(Λ̃/Λ) - Λ̃ + Λ
//! ```
//!
//! The trapezoid uses the interval's own control at both ends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{snap_observations, HybridModel, ObservationSet, TimeGrid};

use super::controls::{VariationalControls, VariationalMarginals};

pub const DEFAULT_RATE_FLOOR: f64 = 1e-8;
pub const DEFAULT_Q_FLOOR: f64 = 1e-10;

/// Decomposition of the objective, all in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub loglik: f64,
    pub kl_jump: f64,
    pub kl_diffusion: f64,
    pub kl_initial: f64,
    pub total: f64,
    /// A logarithm hit the rate or probability floor.
    pub floored: bool,
}

/// A model with observations bound to a grid, plus cached inverses.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub model: &'a HybridModel,
    pub obs: &'a ObservationSet,
    pub grid: TimeGrid,
    pub rate_floor: f64,
    pub q_floor: f64,
    pub(crate) dinv: Vec<Vec<f64>>,
    pub(crate) obs_inv: Vec<f64>,
    pub(crate) obs_logdet: f64,
    pub(crate) init_inv: Vec<Vec<f64>>,
    pub(crate) init_logdet: Vec<f64>,
    /// Observation index at each node, if any.
    pub(crate) obs_at: Vec<Option<usize>>,
}

fn spd(m: &[f64], n: usize, what: String) -> Result<(Vec<f64>, f64)> {
    linalg::spd_inverse_logdet(m, n).ok_or(Error::NotPositiveDefinite(what))
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a HybridModel, obs: &'a ObservationSet, grid: &TimeGrid) -> Result<Self> {
        let n = model.state_dim;
        if let Some(d) = obs.dim() {
            if d != n {
                return Err(Error::Dimension(format!("observations have dimension {d}, model has {n}")));
            }
        }
        let grid = snap_observations(obs, grid)?;
        let mut dinv = Vec::with_capacity(model.num_modes());
        for (z, d) in model.dispersion.iter().enumerate() {
            dinv.push(spd(d, n, format!("dispersion of mode {}", z + 1))?.0);
        }
        let (obs_inv, obs_logdet) = spd(&model.obs_cov, n, "observation covariance".into())?;
        let mut init_inv = Vec::new();
        let mut init_logdet = Vec::new();
        for (z, c) in model.initial.cov.iter().enumerate() {
            let (inv, ld) = spd(c, n, format!("initial covariance of mode {}", z + 1))?;
            init_inv.push(inv);
            init_logdet.push(ld);
        }
        let mut obs_at = vec![None; grid.nodes()];
        for (i, &k) in grid.obs_nodes().iter().enumerate() {
            obs_at[k] = Some(i);
        }
        Ok(Self {
            model,
            obs,
            grid,
            rate_floor: DEFAULT_RATE_FLOOR,
            q_floor: DEFAULT_Q_FLOOR,
            dinv,
            obs_inv,
            obs_logdet,
            init_inv,
            init_logdet,
            obs_at,
        })
    }

    pub fn with_floors(mut self, rate_floor: f64, q_floor: f64) -> Self {
        self.rate_floor = rate_floor;
        self.q_floor = q_floor;
        self
    }

    pub fn modes(&self) -> usize {
        self.model.num_modes()
    }

    pub fn dim(&self) -> usize {
        self.model.state_dim
    }

    /// Per-mode expected observation log-density `E[ln N(x | y, Σ_obs) | z]`
    /// with `y ~ N(μ, Σ)`.
    pub(crate) fn expected_loglik(&self, x: &[f64], mu: &[f64], sigma: &[f64], resid: &mut [f64]) -> f64 {
        let n = self.dim();
        for i in 0..n {
            resid[i] = x[i] - mu[i];
        }
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += resid[i] * self.obs_inv[i * n + j] * resid[j];
            }
        }
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln()
            + self.obs_logdet
            + quad
            + linalg::trace_mul(&self.obs_inv, sigma, n))
    }

    /// Per-mode Gaussian KL `KL(N(μ⁰, Σ⁰) || N(μ_p⁰, Σ_p⁰))`.
    pub(crate) fn gaussian_initial_kl(&self, z: usize, mu0: &[f64], sigma0: &[f64]) -> Result<f64> {
        let n = self.dim();
        let l = linalg::cholesky(sigma0, n).ok_or(Error::CovarianceNotPd {
            node: 0,
            mode: z,
            min_eig: linalg::min_eig_sym(sigma0, n),
        })?;
        let logdet0 = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
        let inv = &self.init_inv[z];
        let mp = &self.model.initial.mean[z];
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += (mp[i] - mu0[i]) * inv[i * n + j] * (mp[j] - mu0[j]);
            }
        }
        Ok(0.5 * (linalg::trace_mul(inv, sigma0, n) + quad - n as f64 + self.init_logdet[z] - logdet0))
    }

    fn initial_kl(&self, controls: &VariationalControls, floored: &mut bool) -> Result<f64> {
        let mut kl = 0.0;
        for z in 0..self.modes() {
            let q = controls.q0[z];
            let p = self.model.initial.p0[z];
            if q > 0.0 {
                if q < self.q_floor || p < self.q_floor {
                    *floored = true;
                }
                kl += q * (q.max(self.q_floor) / p.max(self.q_floor)).ln();
                kl += q * self.gaussian_initial_kl(z, controls.mu0(z), controls.sigma0(z))?;
            }
        }
        Ok(kl)
    }

    /// Evaluates the objective.
    pub fn elbo(&self, controls: &VariationalControls, marginals: &VariationalMarginals) -> Result<ElboBreakdown> {
        let (k, n) = (self.modes(), self.dim());
        let h = self.grid.step();
        let mut floored = false;
        let mut local = Local::new(k, n);

        let mut kl_jump = 0.0;
        let mut kl_diffusion = 0.0;
        for i in 0..self.grid.intervals() {
            for node in [i, i + 1] {
                local.eval(self, controls, i, marginals, node, false);
                floored |= local.floored;
                for z in 0..k {
                    let q = marginals.q(node)[z];
                    kl_jump += 0.5 * h * q * local.j[z];
                    kl_diffusion += 0.5 * h * q * 0.5 * local.m[z];
                }
            }
        }

        let mut loglik = 0.0;
        let mut resid = vec![0.0; n];
        for (i, &node) in self.grid.obs_nodes().iter().enumerate() {
            let x = &self.obs.values()[i];
            for z in 0..k {
                let q = marginals.q(node)[z];
                if q > 0.0 {
                    loglik += q * self.expected_loglik(x, marginals.mu(node, z), marginals.sigma(node, z), &mut resid);
                }
            }
        }

        let kl_initial = self.initial_kl(controls, &mut floored)?;
        let total = loglik - (kl_jump + kl_diffusion + kl_initial);
        if !total.is_finite() {
            return Err(Error::NonFinite { what: "ELBO", node: 0 });
        }
        Ok(ElboBreakdown {
            loglik,
            kl_jump,
            kl_diffusion,
            kl_initial,
            total,
            floored,
        })
    }
}

/// Running-cost terms of every mode at one node under one interval's
/// controls, with derivatives of `c_z = q_z (½ m_z + j_z)`.
pub(crate) struct Local {
    k: usize,
    n: usize,
    pub m: Vec<f64>,
    pub j: Vec<f64>,
    pub dq: Vec<f64>,
    pub dmu: Vec<f64>,
    pub dsig: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub drate: Vec<f64>,
    pub dd: Vec<f64>,
    pub floored: bool,
    abar: Vec<f64>,
    v: Vec<f64>,
    dinv_abar: Vec<f64>,
    dinv_v: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl Local {
    pub fn new(k: usize, n: usize) -> Self {
        let nn = n * n;
        Self {
            k,
            n,
            m: vec![0.0; k],
            j: vec![0.0; k],
            dq: vec![0.0; k],
            dmu: vec![0.0; k * n],
            dsig: vec![0.0; k * nn],
            da: vec![0.0; k * nn],
            db: vec![0.0; k * n],
            drate: vec![0.0; k * k],
            dd: vec![0.0; k * nn],
            floored: false,
            abar: vec![0.0; nn],
            v: vec![0.0; n],
            dinv_abar: vec![0.0; nn],
            dinv_v: vec![0.0; n],
            t1: vec![0.0; nn],
            t2: vec![0.0; nn],
        }
    }

    /// Mismatch `m_z` only.
    pub fn mismatch(&mut self, p: &Problem, a: &[f64], b: &[f64], z: usize, mu: &[f64], sigma: &[f64]) -> f64 {
        let n = self.n;
        let prior = &p.model.drift[z];
        for i in 0..n * n {
            self.abar[i] = a[i] - prior.a[i];
        }
        linalg::mat_vec(&self.abar, mu, n, &mut self.v);
        for i in 0..n {
            self.v[i] += b[i] - prior.b[i];
        }
        let dinv = &p.dinv[z];
        linalg::mul(dinv, &self.abar, n, &mut self.dinv_abar);
        linalg::mat_vec(dinv, &self.v, n, &mut self.dinv_v);
        // tr(Āᵀ D⁻¹ Ā Σ)
        linalg::mul_tn(&self.abar, &self.dinv_abar, n, &mut self.t1);
        linalg::trace_mul(&self.t1, sigma, n) + linalg::dot(&self.v, &self.dinv_v)
    }

    /// Evaluates every mode at `node` with the controls of `interval`.
    pub fn eval(
        &mut self,
        p: &Problem,
        c: &VariationalControls,
        interval: usize,
        marg: &VariationalMarginals,
        node: usize,
        grads: bool,
    ) {
        let (k, n) = (self.k, self.n);
        let nn = n * n;
        let rates = c.rate_block(interval);
        let prior = p.model.rates.as_slice();
        self.floored = false;
        for z in 0..k {
            let mu = marg.mu(node, z);
            let sigma = marg.sigma(node, z);
            let q = marg.q(node)[z];
            self.m[z] = self.mismatch(p, c.a(interval, z), c.b(interval, z), z, mu, sigma);
            let mut j = 0.0;
            for w in 0..k {
                if w == z {
                    continue;
                }
                let rt = rates[z * k + w];
                let rp = prior[z * k + w];
                if rp < p.rate_floor {
                    self.floored = true;
                }
                let lr = (rt.max(p.rate_floor) / rp.max(p.rate_floor)).ln();
                j += rt * lr - rt + rp;
                if grads {
                    self.drate[z * k + w] = q * lr;
                }
            }
            self.j[z] = j;
            if !grads {
                continue;
            }
            self.dq[z] = 0.5 * self.m[z] + j;
            // q Āᵀ D⁻¹ v
            let dmu = &mut self.dmu[z * n..(z + 1) * n];
            linalg::mat_t_vec(&self.abar, &self.dinv_v, n, dmu);
            dmu.iter_mut().for_each(|v| *v *= q);
            // ½ q Āᵀ D⁻¹ Ā
            let dsig = &mut self.dsig[z * nn..(z + 1) * nn];
            linalg::mul_tn(&self.abar, &self.dinv_abar, n, dsig);
            dsig.iter_mut().for_each(|v| *v *= 0.5 * q);
            // q D⁻¹ (Ā Σ + v μᵀ)
            let da = &mut self.da[z * nn..(z + 1) * nn];
            linalg::mul(&self.dinv_abar, sigma, n, da);
            for r in 0..n {
                for s in 0..n {
                    da[r * n + s] = q * (da[r * n + s] + self.dinv_v[r] * mu[s]);
                }
            }
            // q D⁻¹ v
            for r in 0..n {
                self.db[z * n + r] = q * self.dinv_v[r];
            }
            // -½ q D⁻¹ (Ā Σ Āᵀ + v vᵀ) D⁻¹ = -½ q [(D⁻¹Ā) Σ (D⁻¹Ā)ᵀ + (D⁻¹v)(D⁻¹v)ᵀ]
            linalg::mul(&self.dinv_abar, sigma, n, &mut self.t1);
            linalg::mul_nt(&self.t1, &self.dinv_abar, n, &mut self.t2);
            let dd = &mut self.dd[z * nn..(z + 1) * nn];
            for r in 0..n {
                for s in 0..n {
                    dd[r * n + s] = -0.5 * q * (self.t2[r * n + s] + self.dinv_v[r] * self.dinv_v[s]);
                }
            }
        }
    }
}

/// Per-mode `E[‖g - f‖²_{D⁻¹} | z]` at a node, using the controls of the
/// interval starting there (the last interval at the final node).
pub fn drift_mismatch(
    controls: &VariationalControls,
    model: &HybridModel,
    marginals: &VariationalMarginals,
    node: usize,
) -> Result<Vec<f64>> {
    let n = model.state_dim;
    let interval = node.min(controls.intervals.saturating_sub(1));
    let mut out = Vec::with_capacity(model.num_modes());
    for z in 0..model.num_modes() {
        let (dinv, _) = spd(&model.dispersion[z], n, format!("dispersion of mode {}", z + 1))?;
        let prior = &model.drift[z];
        let a = controls.a(interval, z);
        let b = controls.b(interval, z);
        let abar: Vec<f64> = a.iter().zip(&prior.a).map(|(x, y)| x - y).collect();
        out.push(mismatch_terms(
            &abar,
            &b.iter().zip(&prior.b).map(|(x, y)| x - y).collect::<Vec<_>>(),
            &dinv,
            marginals.mu(node, z),
            marginals.sigma(node, z),
        ));
    }
    Ok(out)
}

/// `tr(Āᵀ D⁻¹ Ā Σ) + (Ā μ + b̄)ᵀ D⁻¹ (Ā μ + b̄)`
pub fn mismatch_terms(abar: &[f64], bbar: &[f64], dinv: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let n = mu.len();
    let mut v = vec![0.0; n];
    linalg::mat_vec(abar, mu, n, &mut v);
    for i in 0..n {
        v[i] += bbar[i];
    }
    let mut da = vec![0.0; n * n];
    linalg::mul(dinv, abar, n, &mut da);
    let mut t = vec![0.0; n * n];
    linalg::mul_tn(abar, &da, n, &mut t);
    let mut dv = vec![0.0; n];
    linalg::mat_vec(dinv, &v, n, &mut dv);
    linalg::trace_mul(&t, sigma, n) + linalg::dot(&v, &dv)
}

/// Evaluates the objective for marginals produced from `controls`.
pub fn elbo(
    controls: &VariationalControls,
    marginals: &VariationalMarginals,
    model: &HybridModel,
    obs: &ObservationSet,
    grid: &TimeGrid,
) -> Result<ElboBreakdown> {
    Problem::new(model, obs, grid)?.elbo(controls, marginals)
}

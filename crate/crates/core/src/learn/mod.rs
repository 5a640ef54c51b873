//! Variational EM: the smoother as E-step, then updates of the prior
//! parameters at fixed variational controls.
//!
//! Every M-step update is kept only if the re-evaluated objective does not
//! decrease, so the concatenated trace of inner and outer steps is
//! monotone.

mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HybridModel, InitialLaw, ObservationSet, RateMatrix, TimeGrid};
use crate::smoother::{
    Local,
    propagate, smooth_from, Problem, SmoothOptions, SmoothResult, VariationalControls, VariationalMarginals,
};

pub use kmeans::{init_kmeans, kmeans, Clustering};

/// Outer-loop settings and per-block switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnOptions {
    pub max_outer: usize,
    pub tol_outer: f64,
    pub learn_rates: bool,
    pub learn_obs_cov: bool,
    pub learn_dispersion: bool,
    pub learn_drift: bool,
    pub learn_initials: bool,
    /// Learn a separate dispersion per mode instead of one shared matrix.
    pub dispersion_per_mode: bool,
    /// Off-diagonal rate used by the k-means initialization.
    pub init_rate: f64,
    pub smooth: SmoothOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            max_outer: 100,
            tol_outer: 1e-4,
            learn_rates: true,
            learn_obs_cov: true,
            learn_dispersion: true,
            learn_drift: true,
            learn_initials: true,
            dispersion_per_mode: false,
            init_rate: 1.0,
            smooth: SmoothOptions::default(),
        }
    }
}

impl LearnOptions {
    /// Options with every M-step block switched off.
    pub fn frozen() -> Self {
        Self {
            learn_rates: false,
            learn_obs_cov: false,
            learn_dispersion: false,
            learn_drift: false,
            learn_initials: false,
            ..Self::default()
        }
    }

    fn any_block(&self) -> bool {
        self.learn_rates || self.learn_obs_cov || self.learn_dispersion || self.learn_drift || self.learn_initials
    }
}

/// Closed-form rate update.
#[derive(Debug, Clone, PartialEq)]
pub struct RateUpdate {
    pub rates: RateMatrix,
    /// Modes whose occupation integral vanished; their rows were kept.
    pub unidentifiable: Vec<usize>,
}

/// `Λ_ij = ∫ q_Z(i) Λ̃_ij dt / ∫ q_Z(i) dt` by the trapezoid rule with each
/// interval's rate at both of its ends.
pub fn update_rates(
    marginals: &VariationalMarginals,
    controls: &VariationalControls,
    grid: &TimeGrid,
    previous: &RateMatrix,
    floor: f64,
) -> RateUpdate {
    let k = controls.modes;
    let h = grid.step();
    let mut num = vec![0.0; k * k];
    let mut den = vec![0.0; k];
    for i in 0..controls.intervals {
        for z in 0..k {
            let w = 0.5 * h * (marginals.q(i)[z] + marginals.q(i + 1)[z]);
            den[z] += w;
            for to in 0..k {
                if to != z {
                    num[z * k + to] += w * controls.rate(i, z, to);
                }
            }
        }
    }
    let mut rates = previous.clone();
    let mut unidentifiable = Vec::new();
    for z in 0..k {
        if den[z] < 1e-12 {
            unidentifiable.push(z);
            continue;
        }
        for to in 0..k {
            if to != z {
                rates.set_off_diagonal(z, to, (num[z * k + to] / den[z]).max(floor));
            }
        }
    }
    rates.rebuild_diagonal();
    RateUpdate { rates, unidentifiable }
}

/// `Σ_obs = (1/N) Σ_i Σ_z q_Z(z, t_i) [(x_i - μ)(x_i - μ)ᵀ + Σ]` at the
/// observation nodes of `grid` (which must already be snapped).
pub fn update_obs_covariance(marginals: &VariationalMarginals, obs: &ObservationSet, grid: &TimeGrid) -> Result<Vec<f64>> {
    let n = marginals.dim;
    if obs.is_empty() {
        return Err(Error::Other("no observations".into()));
    }
    if grid.obs_nodes().len() != obs.len() {
        return Err(Error::Dimension("grid is not snapped to these observations".into()));
    }
    let mut out = vec![0.0; n * n];
    for (x, &node) in obs.values().iter().zip(grid.obs_nodes()) {
        for z in 0..marginals.modes {
            let q = marginals.q(node)[z];
            let mu = marginals.mu(node, z);
            let s = marginals.sigma(node, z);
            for r in 0..n {
                for c in 0..n {
                    out[r * n + c] += q * ((x[r] - mu[r]) * (x[c] - mu[c]) + s[r * n + c]);
                }
            }
        }
    }
    let m = obs.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
    Ok(linalg::floor_spectrum(&out, n, 1e-12))
}

/// Ascent gradient of the objective in each mode's dispersion at fixed
/// controls. Includes the effect of `D` on the propagated covariances.
pub fn grad_dispersion(p: &Problem, controls: &VariationalControls, marginals: &VariationalMarginals) -> Result<Vec<Vec<f64>>> {
    Ok(p.sensitivities(controls, marginals)?.dispersion)
}

/// Ascent gradients in the prior drift parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDriftGradients {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// The prior drift enters only the diffusion divergence, through
/// `Ā = A - A_p` and `b̄ = b - b_p`, so its gradient is the negated
/// running-cost derivative in `A` and `b`.
pub fn grad_prior_drift(p: &Problem, controls: &VariationalControls, marginals: &VariationalMarginals) -> PriorDriftGradients {
    let (k, n) = (p.modes(), p.dim());
    let nn = n * n;
    let h = p.grid.step();
    let mut local = Local::new(k, n);
    let mut ga = vec![vec![0.0; nn]; k];
    let mut gb = vec![vec![0.0; n]; k];
    for i in 0..p.grid.intervals() {
        for node in [i, i + 1] {
            local.eval(p, controls, i, marginals, node, true);
            for z in 0..k {
                for e in 0..nn {
                    ga[z][e] += 0.5 * h * local.da[z * nn + e];
                }
                for e in 0..n {
                    gb[z][e] += 0.5 * h * local.db[z * n + e];
                }
            }
        }
    }
    PriorDriftGradients { a: ga, b: gb }
}

/// Prior initial law equal to the variational initial conditions.
pub fn update_prior_initials(controls: &VariationalControls) -> InitialLaw {
    let k = controls.modes;
    InitialLaw {
        p0: controls.q0.clone(),
        mean: (0..k).map(|z| controls.mu0(z).to_vec()).collect(),
        cov: (0..k).map(|z| controls.sigma0(z).to_vec()).collect(),
    }
}

/// Result of [`vem`].
#[derive(Debug, Clone)]
pub struct VemResult {
    pub model: HybridModel,
    pub posterior: SmoothResult,
    /// Objective after every accepted inner or outer step.
    pub trace: Vec<f64>,
    /// Objective at the end of each outer iteration.
    pub outer_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// M-step updates that were rejected, and other notes.
    pub notes: Vec<String>,
}

fn problem<'a>(model: &'a HybridModel, obs: &'a ObservationSet, grid: &TimeGrid, options: &LearnOptions) -> Result<Problem<'a>> {
    Ok(Problem::new(model, obs, grid)?.with_floors(options.smooth.rate_floor, options.smooth.q_floor))
}

/// State shared by the M-step updates of one outer iteration.
struct MStep<'a> {
    obs: &'a ObservationSet,
    grid: &'a TimeGrid,
    options: &'a LearnOptions,
    controls: &'a VariationalControls,
    model: HybridModel,
    marginals: VariationalMarginals,
    value: f64,
    trace: &'a mut Vec<f64>,
    notes: &'a mut Vec<String>,
    iteration: usize,
}

impl MStep<'_> {
    fn score(&self, model: &HybridModel) -> Option<(VariationalMarginals, f64)> {
        let p = problem(model, self.obs, self.grid, self.options).ok()?;
        let marg = propagate(self.controls, model, &p.grid).ok()?;
        let value = p.elbo(self.controls, &marg).ok()?.total;
        value.is_finite().then_some((marg, value))
    }

    /// Keeps `candidate` if it does not lower the objective.
    fn offer(&mut self, candidate: HybridModel, what: &str) -> bool {
        match self.score(&candidate) {
            Some((marg, value)) if value >= self.value => {
                self.model = candidate;
                self.marginals = marg;
                self.value = value;
                self.trace.push(value);
                true
            }
            Some((_, value)) => {
                if value < self.value - 1e-9 {
                    self.notes
                        .push(format!("outer {}: {what} update lowered the objective by {:e}, rejected", self.iteration, self.value - value));
                }
                false
            }
            None => {
                self.notes.push(format!("outer {}: {what} update infeasible, rejected", self.iteration));
                false
            }
        }
    }

    /// Backtracking along `direction(κ)`.
    fn backtrack(&mut self, what: &str, mut candidate: impl FnMut(f64) -> Option<HybridModel>) {
        let mut kappa = 1.0;
        for _ in 0..=self.options.smooth.max_backtracks {
            if let Some(m) = candidate(kappa) {
                if let Some((marg, value)) = self.score(&m) {
                    if value >= self.value {
                        self.model = m;
                        self.marginals = marg;
                        self.value = value;
                        self.trace.push(value);
                        return;
                    }
                }
            }
            kappa *= self.options.smooth.gamma;
        }
        self.notes.push(format!("outer {}: {what} step stalled", self.iteration));
    }

    fn rates(&mut self) -> Result<()> {
        let p = problem(&self.model, self.obs, self.grid, self.options)?;
        let up = update_rates(&self.marginals, self.controls, &p.grid, &self.model.rates, self.options.smooth.rate_floor);
        for z in &up.unidentifiable {
            self.notes.push(format!("outer {}: mode {} unidentifiable, rates kept", self.iteration, z + 1));
        }
        let mut m = self.model.clone();
        m.rates = up.rates;
        self.offer(m, "rate");
        Ok(())
    }

    fn obs_cov(&mut self) -> Result<()> {
        let p = problem(&self.model, self.obs, self.grid, self.options)?;
        let cov = update_obs_covariance(&self.marginals, self.obs, &p.grid)?;
        let mut m = self.model.clone();
        m.obs_cov = cov;
        self.offer(m, "observation covariance");
        Ok(())
    }

    fn dispersion(&mut self) -> Result<()> {
        let n = self.model.state_dim;
        let k = self.model.num_modes();
        let p = problem(&self.model, self.obs, self.grid, self.options)?;
        let mut g = grad_dispersion(&p, self.controls, &self.marginals)?;
        for gz in &mut g {
            linalg::symmetrize(gz, n);
        }
        if !self.options.dispersion_per_mode {
            let total: Vec<f64> = (0..n * n).map(|e| g.iter().map(|gz| gz[e]).sum()).collect();
            g = vec![total; k];
        }
        // D G D scaled by the horizon, capped at a 50% relative change
        let horizon = self.grid.horizon();
        let mut dirs = Vec::with_capacity(k);
        let mut rel: f64 = 0.0;
        for z in 0..k {
            let d = &self.model.dispersion[z];
            let mut t = vec![0.0; n * n];
            let mut dir = vec![0.0; n * n];
            linalg::mul(d, &g[z], n, &mut t);
            linalg::mul(&t, d, n, &mut dir);
            dir.iter_mut().for_each(|v| *v *= 2.0 / horizon);
            let (dinv, _) = linalg::spd_inverse_logdet(d, n).ok_or(Error::NotPositiveDefinite("dispersion".into()))?;
            let mut r = vec![0.0; n * n];
            linalg::mul(&dinv, &dir, n, &mut r);
            rel = rel.max(r.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            dirs.push(dir);
        }
        if rel == 0.0 {
            return Ok(());
        }
        let scale = if rel > 0.5 { 0.5 / rel } else { 1.0 };
        let base = self.model.clone();
        self.backtrack("dispersion", |kappa| {
            let mut m = base.clone();
            for (d, dir) in m.dispersion.iter_mut().zip(&dirs) {
                let cand: Vec<f64> = d.iter().zip(dir).map(|(x, s)| x + kappa * scale * s).collect();
                *d = linalg::floor_spectrum(&cand, n, 1e-10);
            }
            Some(m)
        });
        Ok(())
    }

    fn drift(&mut self) -> Result<()> {
        let n = self.model.state_dim;
        let na = n + 1;
        let k = self.model.num_modes();
        let p = problem(&self.model, self.obs, self.grid, self.options)?;
        let g = grad_prior_drift(&p, self.controls, &self.marginals);
        let h = self.grid.step();
        let mut dirs = Vec::with_capacity(k);
        for z in 0..k {
            // occupation-weighted second moment of (y, 1)
            let mut mom = vec![0.0; na * na];
            for i in 0..self.controls.intervals {
                for node in [i, i + 1] {
                    let q = 0.5 * h * self.marginals.q(node)[z];
                    let mu = self.marginals.mu(node, z);
                    let s = self.marginals.sigma(node, z);
                    for r in 0..n {
                        for c in 0..n {
                            mom[r * na + c] += q * (s[r * n + c] + mu[r] * mu[c]);
                        }
                        mom[r * na + n] += q * mu[r];
                        mom[n * na + r] += q * mu[r];
                    }
                    mom[n * na + n] += q;
                }
            }
            let Some((minv, _)) = linalg::spd_inverse_logdet(&mom, na) else {
                dirs.push(None);
                continue;
            };
            // D [g_A g_b] M⁻¹
            let d = &self.model.dispersion[z];
            let mut gt = vec![0.0; n * na];
            for r in 0..n {
                gt[r * na..r * na + n].copy_from_slice(&g.a[z][r * n..(r + 1) * n]);
                gt[r * na + n] = g.b[z][r];
            }
            let mut out = vec![0.0; n * na];
            for r in 0..n {
                for c in 0..na {
                    let mut s = 0.0;
                    for t in 0..n {
                        for u in 0..na {
                            s += d[r * n + t] * gt[t * na + u] * minv[u * na + c];
                        }
                    }
                    out[r * na + c] = s;
                }
            }
            dirs.push(Some(out));
        }
        if dirs.iter().flatten().all(|d| d.iter().all(|v| *v == 0.0)) {
            return Ok(());
        }
        let base = self.model.clone();
        self.backtrack("prior drift", |kappa| {
            let mut m = base.clone();
            for (drift, dir) in m.drift.iter_mut().zip(&dirs) {
                let Some(dir) = dir else { continue };
                for r in 0..n {
                    for c in 0..n {
                        drift.a[r * n + c] += kappa * dir[r * na + c];
                    }
                    drift.b[r] += kappa * dir[r * na + n];
                }
            }
            Some(m)
        });
        Ok(())
    }

    fn initials(&mut self) {
        let mut m = self.model.clone();
        m.initial = update_prior_initials(self.controls);
        if crate::model::validate_model(&m).is_ok() {
            self.offer(m, "initial law");
        } else {
            self.notes.push(format!("outer {}: initial law update invalid, rejected", self.iteration));
        }
    }
}

/// Variational EM from a k-means initialization.
pub fn vem(obs: &ObservationSet, k: usize, grid: &TimeGrid, options: &LearnOptions, seed: u64) -> Result<VemResult> {
    if obs.is_empty() {
        return Err(Error::Other("no observations".into()));
    }
    let model = init_kmeans(obs, k, seed, options.init_rate)?;
    vem_from(model, obs, grid, options)
}

/// Variational EM from a given initial model.
pub fn vem_from(model: HybridModel, obs: &ObservationSet, grid: &TimeGrid, options: &LearnOptions) -> Result<VemResult> {
    if options.max_outer == 0 || !(options.tol_outer > 0.0) {
        return Err(Error::Other("max_outer must be at least 1 and tol_outer positive".into()));
    }
    let mut model = model;
    let snapped = Problem::new(&model, obs, grid)?.grid;
    let mut controls = VariationalControls::from_prior(&model, &snapped);
    let mut trace = Vec::new();
    let mut outer_trace = Vec::new();
    let mut notes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut posterior;
    loop {
        iterations += 1;
        let p = problem(&model, obs, grid, options)?;
        posterior = smooth_from(&p, controls.clone(), &options.smooth).map_err(|e| Error::EStep {
            iteration: iterations,
            source: Box::new(e),
        })?;
        if trace.last() == posterior.trace.first() {
            trace.extend_from_slice(&posterior.trace[1..]);
        } else {
            trace.extend_from_slice(&posterior.trace);
        }
        controls = posterior.controls.clone();
        if !options.any_block() {
            converged = posterior.converged;
            outer_trace.push(posterior.breakdown.total);
            break;
        }

        let value = *trace.last().expect("smoothing records its start");
        let mut m = MStep {
            obs,
            grid,
            options,
            controls: &controls,
            model: model.clone(),
            marginals: posterior.marginals.clone(),
            value,
            trace: &mut trace,
            notes: &mut notes,
            iteration: iterations,
        };
        if options.learn_rates && m.model.num_modes() > 1 {
            m.rates()?;
        }
        if options.learn_obs_cov {
            m.obs_cov()?;
        }
        if options.learn_dispersion {
            m.dispersion()?;
        }
        if options.learn_drift {
            m.drift()?;
        }
        if options.learn_initials {
            m.initials();
        }
        model = m.model;
        let end = m.value;
        let start = outer_trace.last().copied();
        outer_trace.push(end);
        if let Some(prev) = start {
            if (end - prev).abs() <= options.tol_outer * end.abs().max(1.0) {
                converged = true;
            }
        }
        if converged || iterations >= options.max_outer {
            break;
        }
    }
    // final posterior under the learned model
    let p = problem(&model, obs, grid, options)?;
    if options.any_block() {
        let marginals = propagate(&controls, &model, &p.grid)?;
        posterior.breakdown = p.elbo(&controls, &marginals)?;
        posterior.marginals = marginals;
        posterior.controls = controls;
    }
    Ok(VemResult {
        model,
        posterior,
        trace,
        outer_trace,
        iterations,
        converged,
        notes,
    })
}

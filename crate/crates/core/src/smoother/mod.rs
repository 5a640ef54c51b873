//! Variational smoothing: forward constraint propagation, backward
//! multipliers, the objective and its gradients, and the ascent loop.

mod adjoint;
mod controls;
mod linesearch;
mod objective;
mod propagate;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HybridModel, ObservationSet, TimeGrid};
use crate::simulate::{self, JumpPath, StatePath};

pub use adjoint::Sensitivities;
pub use controls::{ControlGradients, InitialGradients, Multipliers, VariationalControls, VariationalMarginals};
pub use linesearch::{line_search_step, Backtracking, LineSearchResult};
pub use objective::{
    drift_mismatch, elbo, mismatch_terms, ElboBreakdown, Problem, DEFAULT_Q_FLOOR, DEFAULT_RATE_FLOOR,
};
pub(crate) use objective::Local;
pub use propagate::{propagate, propagate_master, propagate_moments};

/// Inner-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothOptions {
    pub tol_inner: f64,
    pub max_inner: usize,
    pub gamma: f64,
    pub max_backtracks: usize,
    pub rate_floor: f64,
    pub q_floor: f64,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        Self {
            tol_inner: 1e-6,
            max_inner: 500,
            gamma: 0.5,
            max_backtracks: 20,
            rate_floor: DEFAULT_RATE_FLOOR,
            q_floor: DEFAULT_Q_FLOOR,
        }
    }
}

impl SmoothOptions {
    fn backtracking(&self) -> Backtracking {
        Backtracking {
            gamma: self.gamma,
            max_backtracks: self.max_backtracks,
        }
    }
}

/// Result of [`smooth`].
#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub marginals: VariationalMarginals,
    pub controls: VariationalControls,
    /// Objective after every accepted step, starting from the initial
    /// controls.
    pub trace: Vec<f64>,
    pub breakdown: ElboBreakdown,
    pub iterations: usize,
    pub converged: bool,
}

/// Backward sweep returning the multipliers.
pub fn backward_multipliers(
    controls: &VariationalControls,
    marginals: &VariationalMarginals,
    model: &HybridModel,
    obs: &ObservationSet,
    grid: &TimeGrid,
) -> Result<Multipliers> {
    Ok(Problem::new(model, obs, grid)?.sensitivities(controls, marginals)?.multipliers)
}

/// Ascent gradients in the per-interval controls.
pub fn grad_controls(
    controls: &VariationalControls,
    marginals: &VariationalMarginals,
    model: &HybridModel,
    obs: &ObservationSet,
    grid: &TimeGrid,
) -> Result<ControlGradients> {
    Ok(Problem::new(model, obs, grid)?.sensitivities(controls, marginals)?.controls)
}

/// Ascent gradients in the variational initial conditions.
pub fn grad_initials(
    controls: &VariationalControls,
    marginals: &VariationalMarginals,
    model: &HybridModel,
    obs: &ObservationSet,
    grid: &TimeGrid,
) -> Result<InitialGradients> {
    let p = Problem::new(model, obs, grid)?;
    let sens = p.sensitivities(controls, marginals)?;
    p.initial_gradients(controls, &sens)
}

fn converged(prev: f64, next: f64, tol: f64) -> bool {
    (next - prev).abs() <= tol * next.abs().max(1.0)
}

/// Runs the inner ascent loop from the prior controls.
pub fn smooth(model: &HybridModel, obs: &ObservationSet, grid: &TimeGrid, options: &SmoothOptions) -> Result<SmoothResult> {
    let p = Problem::new(model, obs, grid)?.with_floors(options.rate_floor, options.q_floor);
    let start = VariationalControls::from_prior(model, &p.grid);
    smooth_from(&p, start, options)
}

/// Runs the inner ascent loop from given controls.
pub fn smooth_from(p: &Problem, start: VariationalControls, options: &SmoothOptions) -> Result<SmoothResult> {
    let mut controls = start;
    controls.normalize_rates(p.rate_floor);
    controls.validate(p.rate_floor)?;
    let mut marg = propagate(&controls, p.model, &p.grid)?;
    let mut value = p.elbo(&controls, &marg)?.total;
    let mut trace = vec![value];
    let bt = options.backtracking();
    let mut iterations = 0;
    let mut done = false;
    while iterations < options.max_inner && !done {
        iterations += 1;
        let before = value;

        let sens = p.sensitivities(&controls, &marg)?;
        let step = linesearch::step_controls(p, &controls, &marg, value, &sens, bt)?;
        let moved = !step.stalled() && step.objective > value;
        if moved {
            (controls, marg) = step.value;
            value = step.objective;
            trace.push(value);
        }

        let sens = if moved { p.sensitivities(&controls, &marg)? } else { sens };
        let step = linesearch::step_initials(p, &controls, &marg, value, &sens, bt)?;
        if !step.stalled() && step.objective > value {
            (controls, marg) = step.value;
            value = step.objective;
            trace.push(value);
        }

        done = converged(before, value, options.tol_inner);
    }
    let breakdown = p.elbo(&controls, &marg)?;
    Ok(SmoothResult {
        marginals: marg,
        controls,
        trace,
        breakdown,
        iterations,
        converged: done,
    })
}

/// Nodewise maximizer of the mixture density: the mode with the highest
/// component peak `q_Z(z) |2π Σ(z)|^{-1/2}`, and its mean. Ties go to the
/// lower mode index.
pub fn map_path(marginals: &VariationalMarginals) -> (Vec<usize>, Vec<Vec<f64>>) {
    let (k, n) = (marginals.modes, marginals.dim);
    let mut zs = Vec::with_capacity(marginals.nodes);
    let mut ys = Vec::with_capacity(marginals.nodes);
    for node in 0..marginals.nodes {
        let mut best = (f64::NEG_INFINITY, 0);
        for z in 0..k {
            let q = marginals.q(node)[z];
            let logdet = linalg::spd_inverse_logdet(marginals.sigma(node, z), n)
                .map(|(_, ld)| ld)
                .unwrap_or(f64::INFINITY);
            let score = if q > 0.0 { q.ln() - 0.5 * logdet } else { f64::NEG_INFINITY };
            if score > best.0 {
                best = (score, z);
            }
        }
        zs.push(best.1);
        ys.push(marginals.mu(node, best.1).to_vec());
    }
    (zs, ys)
}

/// Draws paths from the variational posterior process: modes by thinning
/// under `Λ̃`, states by Euler–Maruyama under `A(z, t) y + b(z, t)` with the
/// model dispersion. Sample `s` uses sub-seed `mix_seed(seed, s)`.
pub fn sample_posterior(
    controls: &VariationalControls,
    dispersion: &[Vec<f64>],
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(JumpPath, StatePath)>> {
    let (k, n) = (controls.modes, controls.dim);
    let h = grid.step();
    let noise: Vec<Vec<f64>> = dispersion
        .iter()
        .enumerate()
        .map(|(z, d)| {
            let scaled: Vec<f64> = d.iter().map(|v| v * h).collect();
            linalg::cholesky(&scaled, n).ok_or_else(|| Error::NotPositiveDefinite(format!("dispersion of mode {}", z + 1)))
        })
        .collect::<Result<_>>()?;
    let init_chol: Vec<Vec<f64>> = (0..k)
        .map(|z| {
            linalg::cholesky(controls.sigma0(z), n).ok_or(Error::CovarianceNotPd {
                node: 0,
                mode: z,
                min_eig: linalg::min_eig_sym(controls.sigma0(z), n),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut rng = simulate::rng_from_seed(simulate::mix_seed(seed, s as u64));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut z0 = k - 1;
        for (z, &q) in controls.q0.iter().enumerate() {
            acc += q;
            if u < acc {
                z0 = z;
                break;
            }
        }
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut y0 = controls.mu0(z0).to_vec();
        for i in 0..n {
            for j in 0..=i {
                y0[i] += init_chol[z0][i * n + j] * xi[j];
            }
        }
        let jumps = simulate::sample_thinned(&controls.rates, k, z0, grid, &mut rng)?;
        let modes = jumps.on_grid(grid);
        let path = simulate::euler_maruyama(
            &y0,
            grid,
            |i, y, f| {
                linalg::mat_vec(controls.a(i, modes[i]), y, n, f);
                for (fv, b) in f.iter_mut().zip(controls.b(i, modes[i])) {
                    *fv += b;
                }
            },
            |i| noise[modes[i]].as_slice(),
            &mut rng,
        );
        out.push((jumps, path));
    }
    Ok(out)
}

//! Backtracking line search and the ascent directions it is applied to.
//!
//! Raw gradients of the discretized objective scale with the step `h` and
//! with the mode weights, so stepping along them directly is badly
//! conditioned. Each parameter block is instead moved along its gradient
//! premultiplied by the inverse curvature of its own running-cost term:
//!
//! * drift `[A b]`: `D [g_A g_b] M⁻¹ / (h q̄)`, with `M` the second moment
//!   of `(y, 1)` under the mode's Gaussian and `q̄` the interval's mode weight, scaled down per interval so that
//!   no entry of `h A` moves by more than `MAX_DRIFT_STEP`;
//! * rates: a step in `ln Λ̃` of `g / (h q̄)`, which at unit step lands on
//!   `Λ e^{ν(z) - ν(z')}`, clamped componentwise to `±MAX_LOG_RATE_STEP`
//!   and with the resulting rates capped by `rate_ceiling`;
//! * initial means `Σ_p⁰ g`, covariances `2 Σ⁰ G Σ⁰`, and mode weights
//!   `q_z (g_z - Σ q g)`.
//!
//! Both caps rescale blocks by positive factors. Every direction therefore
//! has non-negative inner product with the gradient, so the
//! backtracking acceptance rule still guarantees monotone ascent.

use crate::error::Result;
use crate::linalg;

use super::adjoint::Sensitivities;
use super::controls::{InitialGradients, VariationalControls, VariationalMarginals};
use super::objective::Problem;

/// Largest change of `ln Λ̃` per unit step. Where a mode carries almost no
/// mass the rate direction is divided by a floored weight and can reach
/// enormous values; clamping each component keeps the direction an ascent
/// direction while letting one step size serve drift and rates together.
pub const MAX_LOG_RATE_STEP: f64 = 1.0;

/// Largest change of `h A` entries per unit step on any interval. A nearly
/// degenerate mode Gaussian makes `M` close to singular and the drift
/// direction huge there; the whole `[A b]` block of that interval is scaled
/// down together so the covariance flow stays well inside the stable region.
pub const MAX_DRIFT_STEP: f64 = 0.25;

/// Largest off-diagonal variational rate: a mode's total exit rate stays at
/// most `1 / h`, inside the stability region of the master-equation step.
pub fn rate_ceiling(p: &Problem) -> f64 {
    1.0 / (p.grid.step() * (p.modes().max(2) - 1) as f64)
}

/// Backtracking parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backtracking {
    pub gamma: f64,
    pub max_backtracks: usize,
}

impl Default for Backtracking {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            max_backtracks: 20,
        }
    }
}

/// Result of one line search. `exponent` is the accepted `i` in
/// `κ = γ^i`, or `None` when every candidate failed (stalled).
#[derive(Debug, Clone)]
pub struct LineSearchResult<T> {
    pub value: T,
    pub objective: f64,
    pub exponent: Option<usize>,
}

impl<T> LineSearchResult<T> {
    pub fn stalled(&self) -> bool {
        self.exponent.is_none()
    }
}

/// Tries `κ = γ^i` for `i = 0..=max_backtracks` and accepts the first
/// candidate whose objective is at least `current_value`.
///
/// `evaluate(κ)` builds and scores a candidate; `None` marks it infeasible.
pub fn line_search_step<T: Clone>(
    current: &T,
    current_value: f64,
    mut evaluate: impl FnMut(f64) -> Option<(T, f64)>,
    opts: Backtracking,
) -> LineSearchResult<T> {
    let mut kappa = 1.0;
    for i in 0..=opts.max_backtracks {
        if let Some((value, objective)) = evaluate(kappa) {
            if objective >= current_value {
                return LineSearchResult {
                    value,
                    objective,
                    exponent: Some(i),
                };
            }
        }
        kappa *= opts.gamma;
    }
    LineSearchResult {
        value: current.clone(),
        objective: current_value,
        exponent: None,
    }
}

/// Preconditioned ascent direction for the interval controls.
#[derive(Debug, Clone)]
pub struct ControlDirection {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Step in `ln Λ̃` for off-diagonal rates.
    pub log_rates: Vec<f64>,
}

impl ControlDirection {
    pub fn max_abs(&self) -> f64 {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.log_rates)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn control_direction(
    p: &Problem,
    marg: &VariationalMarginals,
    sens: &Sensitivities,
) -> ControlDirection {
    let (k, n) = (p.modes(), p.dim());
    let nn = n * n;
    let na = n + 1;
    let m = p.grid.intervals();
    let h = p.grid.step();
    let g = &sens.controls;
    let mut dir = ControlDirection {
        a: vec![0.0; m * k * nn],
        b: vec![0.0; m * k * n],
        log_rates: vec![0.0; m * k * k],
    };
    let mut mom = vec![0.0; na * na];
    let mut gt = vec![0.0; n * na];
    let mut tmp = vec![0.0; n * na];
    for i in 0..m {
        for z in 0..k {
            // averaged second moment of (y, 1) over the interval ends
            mom.iter_mut().for_each(|v| *v = 0.0);
            for node in [i, i + 1] {
                let mu = marg.mu(node, z);
                let s = marg.sigma(node, z);
                for r in 0..n {
                    for cc in 0..n {
                        mom[r * na + cc] += 0.5 * (s[r * n + cc] + mu[r] * mu[cc]);
                    }
                    mom[r * na + n] += 0.5 * mu[r];
                    mom[n * na + r] += 0.5 * mu[r];
                }
                mom[n * na + n] += 0.5;
            }
            let Some((minv, _)) = linalg::spd_inverse_logdet(&mom, na) else {
                continue;
            };
            let ga = &g.a[(i * k + z) * nn..(i * k + z + 1) * nn];
            let gb = &g.b[(i * k + z) * n..(i * k + z + 1) * n];
            for r in 0..n {
                for cc in 0..n {
                    gt[r * na + cc] = ga[r * n + cc];
                }
                gt[r * na + n] = gb[r];
            }
            // D G̃ M⁻¹ / (h q̄)
            let qbar = 0.5 * (marg.q(i)[z] + marg.q(i + 1)[z]);
            let d = &p.model.dispersion[z];
            for r in 0..n {
                for cc in 0..na {
                    let mut s = 0.0;
                    for t in 0..na {
                        s += gt[r * na + t] * minv[t * na + cc];
                    }
                    tmp[r * na + cc] = s;
                }
            }
            for r in 0..n {
                for cc in 0..na {
                    let mut s = 0.0;
                    for t in 0..n {
                        s += d[r * n + t] * tmp[t * na + cc];
                    }
                    let v = s / (h * qbar.max(p.q_floor));
                    if cc < n {
                        dir.a[(i * k + z) * nn + r * n + cc] = v;
                    } else {
                        dir.b[(i * k + z) * n + r] = v;
                    }
                }
            }
            let da = &mut dir.a[(i * k + z) * nn..(i * k + z + 1) * nn];
            let largest = h * da.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if largest > MAX_DRIFT_STEP {
                let scale = MAX_DRIFT_STEP / largest;
                da.iter_mut().for_each(|v| *v *= scale);
                dir.b[(i * k + z) * n..(i * k + z + 1) * n].iter_mut().for_each(|v| *v *= scale);
            }
            for w in 0..k {
                if w != z {
                    let e = (i * k + z) * k + w;
                    dir.log_rates[e] = (g.rates[e] / (h * qbar.max(p.q_floor))).clamp(-MAX_LOG_RATE_STEP, MAX_LOG_RATE_STEP);
                }
            }
        }
    }
    dir
}

/// `controls + κ · direction`, with rates stepped in log space, floored at
/// `rate_floor` and capped at `rate_ceiling`.
pub(crate) fn apply_control_step(
    c: &VariationalControls,
    dir: &ControlDirection,
    kappa: f64,
    rate_floor: f64,
    rate_ceiling: f64,
) -> VariationalControls {
    let mut out = c.clone();
    for (x, d) in out.a.iter_mut().zip(&dir.a) {
        *x += kappa * d;
    }
    for (x, d) in out.b.iter_mut().zip(&dir.b) {
        *x += kappa * d;
    }
    let k = c.modes;
    for (e, (x, d)) in out.rates.iter_mut().zip(&dir.log_rates).enumerate() {
        let (from, to) = ((e / k) % k, e % k);
        if from != to {
            *x = (*x * (kappa * d).clamp(-50.0, 50.0).exp()).min(rate_ceiling);
        }
    }
    out.normalize_rates(rate_floor);
    out
}

/// Preconditioned ascent direction for the initial conditions.
#[derive(Debug, Clone)]
pub struct InitialDirection {
    pub q0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

pub(crate) fn initial_direction(p: &Problem, c: &VariationalControls, g: &InitialGradients) -> InitialDirection {
    let (k, n) = (p.modes(), p.dim());
    let nn = n * n;
    let mean_g: f64 = (0..k).map(|z| c.q0[z] * g.q0[z]).sum();
    let q0 = (0..k).map(|z| c.q0[z] * (g.q0[z] - mean_g)).collect();
    let mut mu0 = vec![0.0; k * n];
    let mut sigma0 = vec![0.0; k * nn];
    let mut sym = vec![0.0; nn];
    let mut t = vec![0.0; nn];
    for z in 0..k {
        linalg::mat_vec(&p.model.initial.cov[z], &g.mu0[z * n..(z + 1) * n], n, &mut mu0[z * n..(z + 1) * n]);
        let gs = &g.sigma0[z * nn..(z + 1) * nn];
        for r in 0..n {
            for s in 0..n {
                sym[r * n + s] = gs[r * n + s] + gs[s * n + r];
            }
        }
        let s0 = c.sigma0(z);
        linalg::mul(s0, &sym, n, &mut t);
        linalg::mul(&t, s0, n, &mut sigma0[z * nn..(z + 1) * nn]);
    }
    InitialDirection { q0, mu0, sigma0 }
}

/// `initials + κ · direction`; `None` if the candidate leaves the simplex
/// or loses positive definiteness.
pub(crate) fn apply_initial_step(
    c: &VariationalControls,
    dir: &InitialDirection,
    kappa: f64,
) -> Option<VariationalControls> {
    let n = c.dim;
    let mut out = c.clone();
    for (x, d) in out.q0.iter_mut().zip(&dir.q0) {
        *x += kappa * d;
        if *x < 0.0 {
            return None;
        }
    }
    let total: f64 = out.q0.iter().sum();
    out.q0.iter_mut().for_each(|v| *v /= total);
    for (x, d) in out.mu0.iter_mut().zip(&dir.mu0) {
        *x += kappa * d;
    }
    for (x, d) in out.sigma0.iter_mut().zip(&dir.sigma0) {
        *x += kappa * d;
    }
    for s in out.sigma0.chunks_mut(n * n) {
        linalg::symmetrize(s, n);
        linalg::cholesky(s, n)?;
    }
    Some(out)
}

/// One backtracked step on the interval controls.
pub(crate) fn step_controls(
    p: &Problem,
    c: &VariationalControls,
    marg: &VariationalMarginals,
    current: f64,
    sens: &Sensitivities,
    opts: Backtracking,
) -> Result<LineSearchResult<(VariationalControls, VariationalMarginals)>> {
    let dir = control_direction(p, marg, sens);
    let state = (c.clone(), marg.clone());
    if dir.max_abs() == 0.0 {
        return Ok(LineSearchResult {
            value: state,
            objective: current,
            exponent: Some(0),
        });
    }
    Ok(line_search_step(
        &state,
        current,
        |kappa| {
            let cand = apply_control_step(c, &dir, kappa, p.rate_floor, rate_ceiling(p));
            let marg = super::propagate::propagate(&cand, p.model, &p.grid).ok()?;
            let value = p.elbo(&cand, &marg).ok()?.total;
            Some(((cand, marg), value))
        },
        opts,
    ))
}

/// One backtracked step on the initial conditions.
pub(crate) fn step_initials(
    p: &Problem,
    c: &VariationalControls,
    marg: &VariationalMarginals,
    current: f64,
    sens: &Sensitivities,
    opts: Backtracking,
) -> Result<LineSearchResult<(VariationalControls, VariationalMarginals)>> {
    let g = p.initial_gradients(c, sens)?;
    let dir = initial_direction(p, c, &g);
    let state = (c.clone(), marg.clone());
    let size = dir.q0.iter().chain(&dir.mu0).chain(&dir.sigma0).fold(0.0f64, |m, v| m.max(v.abs()));
    if size == 0.0 {
        return Ok(LineSearchResult {
            value: state,
            objective: current,
            exponent: Some(0),
        });
    }
    Ok(line_search_step(
        &state,
        current,
        |kappa| {
            let cand = apply_initial_step(c, &dir, kappa)?;
            let marg = super::propagate::propagate(&cand, p.model, &p.grid).ok()?;
            let value = p.elbo(&cand, &marg).ok()?.total;
            Some(((cand, marg), value))
        },
        opts,
    ))
}

//! Finite-volume solver for the hybrid Fokker–Planck/master equation of a
//! one-dimensional model, with observation resets.
//!
//! The advective-diffusive flux between neighbouring cells uses the
//! Scharfetter–Gummel exponential fitting, which reduces to first-order
//! upwinding when drift dominates and to central differences when diffusion
//! dominates. Time stepping is forward Euler with `substeps` steps per grid
//! interval. The backward sweep applies the transpose of the forward step
//! matrix, so `Σ α β Δy` is conserved exactly between observations.

use crate::error::{Error, Result};
use crate::model::{snap_observations, HybridModel, ObservationSet, TimeGrid};

/// Uniform grid of `points` nodes spanning `[min, max]`, each node the
/// centre of a cell of width `step()`. The outer faces carry no flux.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl YGrid {
    pub fn new(min: f64, max: f64, points: usize) -> Result<Self> {
        if !(min < max) || points < 3 {
            return Err(Error::InvalidModel(format!(
                "y-grid needs min < max and at least 3 points (got [{min}, {max}], {points})"
            )));
        }
        Ok(Self { min, max, points })
    }

    /// Grid covering every centre `±spread`.
    pub fn covering(centres: &[f64], spread: f64, points: usize) -> Result<Self> {
        let lo = centres.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = centres.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo - spread, hi + spread, points)
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.points - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step()
    }
}

/// Density values per (time node, mode, y-node).
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub ygrid: YGrid,
    pub modes: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn slice(&self, node: usize, z: usize) -> &[f64] {
        let p = self.ygrid.points;
        let o = (node * self.modes + z) * p;
        &self.values[o..o + p]
    }

    pub fn mass(&self, node: usize) -> f64 {
        self.mode_marginal(node).iter().sum()
    }

    /// `Σ_y p(y, z) Δy` for each mode.
    pub fn mode_marginal(&self, node: usize) -> Vec<f64> {
        let dy = self.ygrid.step();
        (0..self.modes).map(|z| self.slice(node, z).iter().sum::<f64>() * dy).collect()
    }

    /// Mean and variance of `y` under the normalized marginal over modes.
    pub fn moments(&self, node: usize) -> (f64, f64) {
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for z in 0..self.modes {
            for (i, &p) in self.slice(node, z).iter().enumerate() {
                let y = self.ygrid.point(i);
                m0 += p;
                m1 += p * y;
                m2 += p * y * y;
            }
        }
        let mean = m1 / m0;
        (mean, m2 / m0 - mean * mean)
    }

    /// Mean and variance of `y` given mode `z`, or `None` if the mode has no
    /// mass.
    pub fn mode_moments(&self, node: usize, z: usize) -> Option<(f64, f64)> {
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (i, &p) in self.slice(node, z).iter().enumerate() {
            let y = self.ygrid.point(i);
            m0 += p;
            m1 += p * y;
            m2 += p * y * y;
        }
        if m0 <= 0.0 {
            return None;
        }
        let mean = m1 / m0;
        Some((mean, m2 / m0 - mean * mean))
    }
}

/// Output of [`gfpe_filter`].
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Filtering density `α`, normalized after each observation reset.
    pub density: GridDensity,
    /// Largest `|Δ mass| / Δt` over any stretch between observations.
    pub mass_drift: f64,
    /// `Σ ln C_i`, the log normalizers of the resets.
    pub log_evidence: f64,
}

/// Output of [`gfpe_smoother`].
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub filter: GridDensity,
    /// Backward function `β` at each node (right limits, before the
    /// observation at that node is absorbed), rescaled to unit maximum.
    pub backward: GridDensity,
    /// `α β` normalized at every node.
    pub smoothed: GridDensity,
    pub mass_drift: f64,
    pub log_evidence: f64,
}

/// Smallest number of forward-Euler substeps per grid interval that meets
/// both the diffusion bound `0.4 Δy² / max D` and positivity of the step
/// matrix.
pub fn stable_substeps(model: &HybridModel, ygrid: &YGrid, grid: &TimeGrid) -> Result<usize> {
    let op = Operator::new(model, ygrid)?;
    Ok((grid.step() / op.max_step()).ceil().max(1.0) as usize)
}

/// Discretized generator: per mode and interior face `i + ½`,
/// `flux = left[i] p_i - right[i] p_{i+1}` (already divided by `Δy`).
struct Operator {
    k: usize,
    p: usize,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    rates: Vec<f64>,
    exit: Vec<f64>,
    diffusion_bound: f64,
}

/// Bernoulli function `x / (eˣ - 1)`.
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

impl Operator {
    fn new(model: &HybridModel, ygrid: &YGrid) -> Result<Self> {
        if model.state_dim != 1 {
            return Err(Error::Dimension("the grid oracle supports 1D only".into()));
        }
        let k = model.num_modes();
        let p = ygrid.points;
        let dy = ygrid.step();
        let mut left = vec![vec![0.0; p]; k];
        let mut right = vec![vec![0.0; p]; k];
        let mut max_d: f64 = 0.0;
        for z in 0..k {
            let d = model.dispersion[z][0];
            max_d = max_d.max(d);
            let (a, b) = (model.drift[z].a[0], model.drift[z].b[0]);
            let coef = 0.5 * d / (dy * dy);
            for i in 0..p - 1 {
                let y = ygrid.point(i) + 0.5 * dy;
                let w = (a * y + b) * dy / (0.5 * d);
                left[z][i] = coef * bernoulli(-w);
                right[z][i] = coef * bernoulli(w);
            }
        }
        let rates = model.rates.as_slice().to_vec();
        let exit = (0..k).map(|z| model.rates.exit_rate(z)).collect();
        Ok(Self {
            k,
            p,
            left,
            right,
            rates,
            exit,
            diffusion_bound: 0.4 * dy * dy / max_d,
        })
    }

    fn max_step(&self) -> f64 {
        let mut out: f64 = 0.0;
        for z in 0..self.k {
            for i in 0..self.p {
                let mut r = self.left[z][i] + self.exit[z];
                if i > 0 {
                    r += self.right[z][i - 1];
                }
                out = out.max(r);
            }
        }
        self.diffusion_bound.min(1.0 / out)
    }

    /// `out = p + h L p`.
    fn forward(&self, p: &[f64], h: f64, out: &mut [f64]) {
        let np = self.p;
        out.copy_from_slice(p);
        for z in 0..self.k {
            let pz = &p[z * np..(z + 1) * np];
            let oz = &mut out[z * np..(z + 1) * np];
            let (l, r) = (&self.left[z], &self.right[z]);
            for i in 0..np - 1 {
                let flux = h * (l[i] * pz[i] - r[i] * pz[i + 1]);
                oz[i] -= flux;
                oz[i + 1] += flux;
            }
        }
        for from in 0..self.k {
            for to in 0..self.k {
                let rate = self.rates[from * self.k + to];
                if from == to || rate == 0.0 {
                    continue;
                }
                for i in 0..np {
                    let m = h * rate * p[from * np + i];
                    out[from * np + i] -= m;
                    out[to * np + i] += m;
                }
            }
        }
    }

    /// `out = β + h Lᵀ β`.
    fn backward(&self, beta: &[f64], h: f64, out: &mut [f64]) {
        let np = self.p;
        out.copy_from_slice(beta);
        for z in 0..self.k {
            let bz = &beta[z * np..(z + 1) * np];
            let oz = &mut out[z * np..(z + 1) * np];
            let (l, r) = (&self.left[z], &self.right[z]);
            for i in 0..np - 1 {
                let diff = bz[i + 1] - bz[i];
                oz[i] += h * l[i] * diff;
                oz[i + 1] -= h * r[i] * diff;
            }
        }
        for from in 0..self.k {
            for to in 0..self.k {
                let rate = self.rates[from * self.k + to];
                if from == to || rate == 0.0 {
                    continue;
                }
                for i in 0..np {
                    out[from * np + i] += h * rate * (beta[to * np + i] - beta[from * np + i]);
                }
            }
        }
    }
}

struct Setup {
    op: Operator,
    grid: TimeGrid,
    obs_at: Vec<Option<usize>>,
    lik: Vec<Vec<f64>>,
    h: f64,
    substeps: usize,
}

fn setup(model: &HybridModel, obs: &ObservationSet, ygrid: &YGrid, grid: &TimeGrid, substeps: usize) -> Result<Setup> {
    let op = Operator::new(model, ygrid)?;
    let grid = snap_observations(obs, grid)?;
    let substeps = substeps.max(1);
    let h = grid.step() / substeps as f64;
    let bound = op.max_step();
    if h > bound * (1.0 + 1e-12) {
        return Err(Error::Unstable { step: h, required: bound });
    }
    let mut obs_at = vec![None; grid.nodes()];
    for (i, &k) in grid.obs_nodes().iter().enumerate() {
        obs_at[k] = Some(i);
    }
    let r = model.obs_cov[0];
    let lik = obs
        .values()
        .iter()
        .map(|x| {
            (0..ygrid.points)
                .map(|i| {
                    let e = x[0] - ygrid.point(i);
                    (-0.5 * e * e / r).exp() / (2.0 * std::f64::consts::PI * r).sqrt()
                })
                .collect()
        })
        .collect();
    Ok(Setup {
        op,
        grid,
        obs_at,
        lik,
        h,
        substeps,
    })
}

fn check_node(values: &[f64], k: usize, np: usize, dy: f64, node: usize) -> Result<()> {
    let mut edge = 0.0;
    for z in 0..k {
        let s = &values[z * np..(z + 1) * np];
        if let Some(&v) = s.iter().find(|v| **v < -1e-12 || !v.is_finite()) {
            return Err(Error::NegativeProbability { node, value: v });
        }
        edge += (s[0] + s[np - 1]) * dy;
    }
    if edge > 1e-8 {
        return Err(Error::BoundaryMass { node, mass: edge });
    }
    Ok(())
}

/// Filtering densities at every grid node.
///
/// The initial density samples each mode's Gaussian on the y-grid and
/// rescales it to the mode's prior weight. `substeps` forward-Euler steps
/// are taken per grid interval; see [`stable_substeps`].
pub fn gfpe_filter(
    model: &HybridModel,
    obs: &ObservationSet,
    ygrid: &YGrid,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<FilterOutput> {
    let s = setup(model, obs, ygrid, grid, substeps)?;
    let (k, np) = (s.op.k, s.op.p);
    let dy = ygrid.step();
    let nodes = s.grid.nodes();
    let mut values = Vec::with_capacity(nodes * k * np);

    let mut cur = vec![0.0; k * np];
    for z in 0..k {
        let (m, v) = (model.initial.mean[z][0], model.initial.cov[z][0]);
        let slice = &mut cur[z * np..(z + 1) * np];
        for (i, x) in slice.iter_mut().enumerate() {
            let e = ygrid.point(i) - m;
            *x = (-0.5 * e * e / v).exp();
        }
        let total: f64 = slice.iter().sum::<f64>() * dy;
        slice.iter_mut().for_each(|x| *x *= model.initial.p0[z] / total);
    }
    check_node(&cur, k, np, dy, 0)?;
    values.extend_from_slice(&cur);

    let mut next = vec![0.0; k * np];
    let mut mass_drift: f64 = 0.0;
    let mut log_evidence = 0.0;
    let mut segment_start = (0.0, 1.0);
    for node in 1..nodes {
        for _ in 0..s.substeps {
            s.op.forward(&cur, s.h, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        let t = s.grid.time(node);
        if let Some(i) = s.obs_at[node] {
            let mass: f64 = cur.iter().sum::<f64>() * dy;
            mass_drift = mass_drift.max((mass - segment_start.1).abs() / (t - segment_start.0));
            for z in 0..k {
                for (x, l) in cur[z * np..(z + 1) * np].iter_mut().zip(&s.lik[i]) {
                    *x *= l;
                }
            }
            let c: f64 = cur.iter().sum::<f64>() * dy;
            if !(c > 0.0) {
                return Err(Error::NonFinite {
                    what: "observation normalizer",
                    node,
                });
            }
            log_evidence += c.ln();
            cur.iter_mut().for_each(|x| *x /= c);
            segment_start = (t, 1.0);
        }
        check_node(&cur, k, np, dy, node)?;
        values.extend_from_slice(&cur);
    }
    let t_end = s.grid.horizon();
    if t_end > segment_start.0 {
        let mass: f64 = cur.iter().sum::<f64>() * dy;
        mass_drift = mass_drift.max((mass - segment_start.1).abs() / (t_end - segment_start.0));
    }
    Ok(FilterOutput {
        density: GridDensity {
            ygrid: *ygrid,
            modes: k,
            times: s.grid.times(),
            values,
        },
        mass_drift,
        log_evidence,
    })
}

/// Smoothing densities at every grid node from a forward filter and a
/// backward sweep with `β(T) = 1`.
pub fn gfpe_smoother(
    model: &HybridModel,
    obs: &ObservationSet,
    ygrid: &YGrid,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<SmootherOutput> {
    let filter = gfpe_filter(model, obs, ygrid, grid, substeps)?;
    let s = setup(model, obs, ygrid, grid, substeps)?;
    let (k, np) = (s.op.k, s.op.p);
    let dy = ygrid.step();
    let nodes = s.grid.nodes();
    let mut beta_values = vec![0.0; nodes * k * np];
    let mut smooth_values = vec![0.0; nodes * k * np];

    let mut cur = vec![1.0; k * np];
    let mut next = vec![0.0; k * np];
    for node in (0..nodes).rev() {
        let block = node * k * np..(node + 1) * k * np;
        beta_values[block.clone()].copy_from_slice(&cur);
        let alpha = &filter.density.values[block.clone()];
        let out = &mut smooth_values[block];
        for ((o, a), b) in out.iter_mut().zip(alpha).zip(&cur) {
            *o = a * b;
        }
        let total: f64 = out.iter().sum::<f64>() * dy;
        out.iter_mut().for_each(|x| *x /= total);
        check_node(out, k, np, dy, node)?;

        if node == 0 {
            break;
        }
        if let Some(i) = s.obs_at[node] {
            for z in 0..k {
                for (x, l) in cur[z * np..(z + 1) * np].iter_mut().zip(&s.lik[i]) {
                    *x *= l;
                }
            }
        }
        for _ in 0..s.substeps {
            s.op.backward(&cur, s.h, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        let peak = cur.iter().copied().fold(0.0f64, f64::max);
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::NonFinite {
                what: "backward function",
                node: node - 1,
            });
        }
        cur.iter_mut().for_each(|x| *x /= peak);
    }
    let times = filter.density.times.clone();
    Ok(SmootherOutput {
        backward: GridDensity {
            ygrid: *ygrid,
            modes: k,
            times: times.clone(),
            values: beta_values,
        },
        smoothed: GridDensity {
            ygrid: *ygrid,
            modes: k,
            times,
            values: smooth_values,
        },
        mass_drift: filter.mass_drift,
        log_evidence: filter.log_evidence,
        filter: filter.density,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoother::VariationalMarginals;

use super::gfpe::GridDensity;
use super::kalman::GaussianSmoothing;

/// Node-wise summary shared by every marginal representation: mode
/// probabilities, mixture mean and mixture covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub modes: usize,
    pub dim: usize,
    pub times: Vec<f64>,
    /// `nodes × modes`.
    pub q: Vec<f64>,
    /// `nodes × dim`.
    pub mean: Vec<f64>,
    /// `nodes × dim × dim`.
    pub cov: Vec<f64>,
}

impl MarginalSummary {
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn from_variational(marg: &VariationalMarginals, times: &[f64]) -> Self {
        let n = marg.dim;
        let mut mean = Vec::with_capacity(marg.nodes * n);
        let mut cov = Vec::with_capacity(marg.nodes * n * n);
        let mut q = Vec::with_capacity(marg.nodes * marg.modes);
        for node in 0..marg.nodes {
            q.extend_from_slice(marg.q(node));
            mean.extend(marg.mixture_mean(node));
            cov.extend(marg.mixture_cov(node));
        }
        Self {
            modes: marg.modes,
            dim: n,
            times: times.to_vec(),
            q,
            mean,
            cov,
        }
    }

    pub fn from_gaussian(s: &GaussianSmoothing, times: &[f64]) -> Self {
        let n = s.mean.first().map_or(0, Vec::len);
        Self {
            modes: 1,
            dim: n,
            times: times.to_vec(),
            q: vec![1.0; s.mean.len()],
            mean: s.mean.concat(),
            cov: s.cov.concat(),
        }
    }

    pub fn from_grid(d: &GridDensity) -> Self {
        let nodes = d.nodes();
        let mut q = Vec::with_capacity(nodes * d.modes);
        let mut mean = Vec::with_capacity(nodes);
        let mut cov = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let w = d.mode_marginal(node);
            let total: f64 = w.iter().sum();
            q.extend(w.iter().map(|v| v / total));
            let (m, v) = d.moments(node);
            mean.push(m);
            cov.push(v);
        }
        Self {
            modes: d.modes,
            dim: 1,
            times: d.times.clone(),
            q,
            mean,
            cov,
        }
    }

    pub fn argmax_mode(&self, node: usize) -> usize {
        let q = &self.q[node * self.modes..(node + 1) * self.modes];
        let mut best = 0;
        for (z, &v) in q.iter().enumerate() {
            if v > q[best] {
                best = z;
            }
        }
        best
    }
}

/// Gaps between two marginal summaries on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub nodes: usize,
    pub mean_gap: f64,
    pub cov_gap: f64,
    /// Largest total-variation distance between mode marginals.
    pub mode_tv_max: f64,
    pub mode_tv_mean: f64,
    /// Fraction of nodes where both put the highest probability on the same
    /// mode.
    pub argmax_agreement: f64,
}

pub fn compare_marginals(a: &MarginalSummary, b: &MarginalSummary) -> Result<ComparisonReport> {
    if a.nodes() != b.nodes() || a.modes != b.modes || a.dim != b.dim {
        return Err(Error::Dimension(format!(
            "cannot compare marginals with {} nodes, {} modes, dim {} against {} nodes, {} modes, dim {}",
            a.nodes(),
            a.modes,
            a.dim,
            b.nodes(),
            b.modes,
            b.dim
        )));
    }
    if let Some(i) = (0..a.nodes()).find(|&i| (a.times[i] - b.times[i]).abs() > 1e-9 * a.times[i].abs().max(1.0)) {
        return Err(Error::Dimension(format!(
            "time grids differ at node {i}: {} vs {}",
            a.times[i], b.times[i]
        )));
    }
    let sup = |x: &[f64], y: &[f64]| x.iter().zip(y).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
    let nodes = a.nodes();
    let k = a.modes;
    let mut tv_max: f64 = 0.0;
    let mut tv_sum = 0.0;
    let mut agree = 0usize;
    for node in 0..nodes {
        let qa = &a.q[node * k..(node + 1) * k];
        let qb = &b.q[node * k..(node + 1) * k];
        let tv = 0.5 * qa.iter().zip(qb).map(|(u, v)| (u - v).abs()).sum::<f64>();
        tv_max = tv_max.max(tv);
        tv_sum += tv;
        if a.argmax_mode(node) == b.argmax_mode(node) {
            agree += 1;
        }
    }
    Ok(ComparisonReport {
        nodes,
        mean_gap: sup(&a.mean, &b.mean),
        cov_gap: sup(&a.cov, &b.cov),
        mode_tv_max: tv_max,
        mode_tv_mean: if nodes > 0 { tv_sum / nodes as f64 } else { 0.0 },
        argmax_agreement: if nodes > 0 { agree as f64 / nodes as f64 } else { 1.0 },
    })
}

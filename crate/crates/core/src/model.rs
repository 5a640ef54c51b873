//! Hybrid process models: a Markov jump process over `K` modes driving a
//! linear switching diffusion in `R^n`, observed at discrete times through
//! additive Gaussian noise.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Row-sum tolerance for rate matrices and simplex vectors.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Transition rate matrix `Λ(z, z')`, row-major `K x K`.
///
/// The diagonal is stored redundantly as minus the exit rate, so each row
/// sums to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl RateMatrix {
    /// Builds a rate matrix from its off-diagonal entries; the diagonal of
    /// `rows` is ignored and rebuilt as the negative row sum.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension(format!("rate matrix must be K x K, got {k} rows")));
        }
        let mut entries = vec![0.0; k * k];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    entries[i * k + j] = v;
                }
            }
        }
        let mut out = Self { k, entries };
        out.rebuild_diagonal();
        Ok(out)
    }

    /// Wraps raw entries without touching the diagonal. Used by validation
    /// tests and by callers that want to check a matrix as given.
    pub fn from_raw(k: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), k * k);
        Self { k, entries }
    }

    pub fn uniform(k: usize, rate: f64) -> Self {
        let rows = vec![vec![rate; k]; k];
        Self::from_rows(&rows).expect("square by construction")
    }

    pub fn zeros(k: usize) -> Self {
        Self::uniform(k, 0.0)
    }

    pub fn rebuild_diagonal(&mut self) {
        let k = self.k;
        for i in 0..k {
            let exit: f64 = (0..k).filter(|&j| j != i).map(|j| self.entries[i * k + j]).sum();
            self.entries[i * k + i] = -exit;
        }
    }

    pub fn num_modes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.k + to]
    }

    pub fn set_off_diagonal(&mut self, from: usize, to: usize, rate: f64) {
        assert_ne!(from, to);
        self.entries[from * self.k + to] = rate;
        self.rebuild_diagonal();
    }

    #[inline]
    pub fn exit_rate(&self, mode: usize) -> f64 {
        -self.entries[mode * self.k + mode]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.k).map(|r| r.to_vec()).collect()
    }
}

/// Linear drift `f(y, z) = A_p(z) y + b_p(z)` of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDrift {
    /// Row-major `n x n`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearDrift {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Self {
        Self { a, b }
    }

    /// Mean-reverting form `α (β - y)`, i.e. `A_p = -α`, `b_p = α β`.
    pub fn from_alpha_beta(alpha: &[f64], beta: &[f64]) -> Self {
        let n = beta.len();
        let a = alpha.iter().map(|v| -v).collect();
        let mut b = vec![0.0; n];
        linalg::mat_vec(alpha, beta, n, &mut b);
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.a.iter().map(|v| -v).collect()
    }

    /// Set point `β = -A_p^{-1} b_p`, `None` when `A_p` is singular.
    pub fn beta(&self) -> Option<Vec<f64>> {
        let n = self.dim();
        let a = linalg::from_flat(&self.a, n);
        let lu = a.lu();
        let rhs = nalgebra::DVector::from_column_slice(&self.b);
        if lu.determinant().abs() < 1e-14 {
            return None;
        }
        lu.solve(&rhs).map(|x| x.iter().map(|v| -v).collect())
    }

    pub fn eval(&self, y: &[f64], out: &mut [f64]) {
        linalg::mat_vec(&self.a, y, self.dim(), out);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
    }
}

/// Initial law `p0(z) N(y | μ_p⁰(z), Σ_p⁰(z))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLaw {
    pub p0: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    /// Row-major covariance per mode.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub state_dim: usize,
    pub rates: RateMatrix,
    pub drift: Vec<LinearDrift>,
    /// Per-mode dispersion `D(z)`, row-major `n x n`.
    pub dispersion: Vec<Vec<f64>>,
    pub initial: InitialLaw,
    /// Observation covariance `Σ_obs` (observation map is the identity).
    pub obs_cov: Vec<f64>,
}

impl HybridModel {
    pub fn num_modes(&self) -> usize {
        self.rates.num_modes()
    }

    /// Validated constructor.
    pub fn new(
        rates: RateMatrix,
        drift: Vec<LinearDrift>,
        dispersion: Vec<Vec<f64>>,
        initial: InitialLaw,
        obs_cov: Vec<f64>,
    ) -> Result<Self> {
        let state_dim = drift.first().map(|d| d.dim()).unwrap_or(0);
        let model = Self {
            state_dim,
            rates,
            drift,
            dispersion,
            initial,
            obs_cov,
        };
        let report = validate_model(&model);
        if report.is_ok() {
            Ok(model)
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }

    /// Whether every mode shares the same dispersion matrix.
    pub fn has_shared_dispersion(&self) -> bool {
        self.dispersion.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub component: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, component: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            component,
            message: message.into(),
        });
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.component, v.message)?;
        }
        Ok(())
    }
}

fn check_spd(report: &mut ValidationReport, component: &'static str, what: &str, m: &[f64], n: usize) {
    if m.len() != n * n {
        report.push(component, format!("{what} has {} entries, expected {}", m.len(), n * n));
        return;
    }
    if m.iter().any(|v| !v.is_finite()) {
        report.push(component, format!("{what} has non-finite entries"));
        return;
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-12 * scale {
                report.push(component, format!("{what} not symmetric"));
                return;
            }
        }
    }
    if linalg::min_eig_sym(m, n) <= 0.0 || linalg::cholesky(m, n).is_none() {
        report.push(component, format!("{what} not PD"));
    }
}

/// Checks every model invariant and reports all violations at once.
pub fn validate_model(model: &HybridModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = model.rates.num_modes();
    let n = model.state_dim;
    if k == 0 {
        report.push("modes", "mode count must be at least 1");
        return report;
    }
    if n == 0 {
        report.push("state", "state dimension must be at least 1");
        return report;
    }

    let rates = &model.rates;
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            let v = rates.get(i, j);
            if !v.is_finite() {
                report.push("rates", format!("non-finite rate at ({}, {})", i + 1, j + 1));
            }
            if i != j && v < 0.0 {
                report.push(
                    "rates",
                    format!("negative off-diagonal rate Λ({}, {}) = {v}", i + 1, j + 1),
                );
            }
            row += v;
        }
        if row.abs() > SIMPLEX_TOL {
            report.push("rates", format!("row {} sums to {row:e}, not 0", i + 1));
        }
    }

    if model.drift.len() != k {
        report.push("drift", format!("{} drift blocks for {k} modes", model.drift.len()));
    }
    for (z, d) in model.drift.iter().enumerate() {
        if d.a.len() != n * n || d.b.len() != n {
            report.push("drift", format!("mode {} drift has wrong dimensions", z + 1));
        } else if d.a.iter().chain(&d.b).any(|v| !v.is_finite()) {
            report.push("drift", format!("mode {} drift has non-finite entries", z + 1));
        }
    }

    if model.dispersion.len() != k {
        report.push("dispersion", format!("{} dispersion blocks for {k} modes", model.dispersion.len()));
    }
    for (z, d) in model.dispersion.iter().enumerate() {
        check_spd(&mut report, "dispersion", &format!("dispersion of mode {}", z + 1), d, n);
    }

    let init = &model.initial;
    if init.p0.len() != k {
        report.push("initial", format!("p0 has {} entries for {k} modes", init.p0.len()));
    } else {
        if init.p0.iter().any(|&p| !(p >= 0.0)) {
            report.push("initial", "p0 has negative entries");
        }
        let s: f64 = init.p0.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            report.push("initial", format!("p0 sums to {s}, not 1"));
        }
    }
    if init.mean.len() != k || init.mean.iter().any(|m| m.len() != n) {
        report.push("initial", "initial means have wrong dimensions");
    }
    if init.cov.len() != k {
        report.push("initial", "initial covariances have wrong count");
    }
    for (z, c) in init.cov.iter().enumerate() {
        check_spd(&mut report, "initial", &format!("initial covariance of mode {}", z + 1), c, n);
    }

    check_spd(&mut report, "observation", "observation covariance", &model.obs_cov, n);
    report
}

/// Uniform time grid `t_k = k h`, `k = 0..=M`, with optional observation
/// node indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    step: f64,
    intervals: usize,
    obs_nodes: Vec<usize>,
}

impl TimeGrid {
    pub fn new(horizon: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidModel(format!(
                "grid needs positive horizon and step, got T={horizon}, h={step}"
            )));
        }
        let m = (horizon / step).round();
        if (m * step - horizon).abs() > 1e-12 * horizon.max(1.0) || m < 1.0 {
            return Err(Error::InvalidModel(format!(
                "horizon {horizon} is not a whole number of steps {step}"
            )));
        }
        Ok(Self {
            horizon,
            step: horizon / m,
            intervals: m as usize,
            obs_nodes: Vec::new(),
        })
    }

    pub fn from_intervals(horizon: f64, intervals: usize) -> Result<Self> {
        Self::new(horizon, horizon / intervals as f64)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    #[inline]
    pub fn time(&self, node: usize) -> f64 {
        if node == self.intervals {
            self.horizon
        } else {
            node as f64 * self.step
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.time(k)).collect()
    }

    pub fn obs_nodes(&self) -> &[usize] {
        &self.obs_nodes
    }

    /// Observation nodes must be strictly increasing within `1..=M`.
    pub fn with_obs_nodes(mut self, nodes: Vec<usize>) -> Result<Self> {
        if nodes.windows(2).any(|w| w[0] >= w[1]) || nodes.iter().any(|&k| k == 0 || k > self.intervals) {
            return Err(Error::InvalidModel("observation nodes must be strictly increasing and on the grid".into()));
        }
        self.obs_nodes = nodes;
        Ok(self)
    }

    /// Nearest node to `t`, ties broken toward the later node.
    pub fn nearest_node(&self, t: f64) -> usize {
        let x = t / self.step;
        let base = x.floor();
        let frac = x - base;
        let node = if frac >= 0.5 - 1e-9 { base + 1.0 } else { base };
        (node.max(0.0) as usize).min(self.intervals)
    }

    /// Whether two grids discretize the same interval identically.
    pub fn same_discretization(&self, other: &TimeGrid) -> bool {
        self.intervals == other.intervals && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon.max(1.0)
    }
}

/// Observations `x_i` at strictly increasing times `t_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} observation times but {} values",
                times.len(),
                values.len()
            )));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::UnorderedObservations(i + 1));
        }
        if let Some(first) = values.first() {
            if values.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Dimension("observation vectors differ in length".into()));
            }
        }
        Ok(Self { times, values })
    }

    pub fn empty() -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> Option<usize> {
        self.values.first().map(|v| v.len())
    }
}

/// Assigns each observation to its nearest grid node.
pub fn snap_observations(obs: &ObservationSet, grid: &TimeGrid) -> Result<TimeGrid> {
    let mut nodes = Vec::with_capacity(obs.len());
    for (i, &t) in obs.times().iter().enumerate() {
        if !(t > 0.0) || t > grid.horizon() * (1.0 + 1e-12) {
            return Err(Error::ObservationOutOfRange {
                time: t,
                horizon: grid.horizon(),
            });
        }
        let node = grid.nearest_node(t);
        if node == 0 {
            return Err(Error::GridTooCoarseAtStart { index: i, time: t });
        }
        if let Some(&prev) = nodes.last() {
            if node == prev {
                return Err(Error::GridTooCoarse {
                    first: i - 1,
                    second: i,
                    node,
                });
            }
        }
        nodes.push(node);
    }
    grid.clone().with_obs_nodes(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_mode() -> HybridModel {
        HybridModel::new(
            RateMatrix::uniform(2, 0.2),
            vec![
                LinearDrift::from_alpha_beta(&[1.5], &[-1.0]),
                LinearDrift::from_alpha_beta(&[1.5], &[1.0]),
            ],
            vec![vec![0.25], vec![0.25]],
            InitialLaw {
                p0: vec![0.0, 1.0],
                mean: vec![vec![-1.0], vec![1.0]],
                cov: vec![vec![0.2], vec![0.2]],
            },
            vec![0.1],
        )
        .unwrap()
    }

    #[test]
    fn valid_model_passes() {
        let m = two_mode();
        assert!(validate_model(&m).is_ok());
        assert_eq!(m.rates.exit_rate(0), 0.2);
    }

    #[test]
    fn negative_rate_reported() {
        let mut m = two_mode();
        m.rates = RateMatrix::from_raw(2, vec![0.5, -0.5, 0.2, -0.2]);
        let report = validate_model(&m);
        assert!(report.mentions("negative off-diagonal rate"), "{report}");
    }

    #[test]
    fn singular_observation_covariance_reported() {
        let mut m = two_mode();
        m.obs_cov = vec![0.0];
        let report = validate_model(&m);
        assert!(report.mentions("observation covariance not PD"), "{report}");
        // all violations at once, component named
        m.dispersion[1] = vec![-1.0];
        let report = validate_model(&m);
        assert_eq!(report.violations.len(), 2);
        assert!(report.violations.iter().any(|v| v.component == "dispersion"));
    }

    #[test]
    fn validation_is_idempotent() {
        let mut m = two_mode();
        m.initial.p0 = vec![0.3, 0.3];
        let a = validate_model(&m);
        let b = validate_model(&m);
        assert_eq!(a, b);
        assert!(a.mentions("p0 sums"));
    }

    #[test]
    fn alpha_beta_round_trip() {
        let d = LinearDrift::from_alpha_beta(&[1.5], &[-1.0]);
        assert_eq!(d.a, vec![-1.5]);
        assert_eq!(d.b, vec![-1.5]);
        assert!((d.beta().unwrap()[0] + 1.0).abs() < 1e-15);
        let singular = LinearDrift::new(vec![0.0], vec![1.0]);
        assert!(singular.beta().is_none());
    }

    #[test]
    fn snapping_examples() {
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let obs = ObservationSet::new(vec![3.004], vec![vec![0.0]]).unwrap();
        assert_eq!(snap_observations(&obs, &grid).unwrap().obs_nodes(), &[300]);

        let grid = TimeGrid::new(10.0, 1.0).unwrap();
        // 0.4 rounds onto the initial node, which carries no observation
        let obs = ObservationSet::new(vec![0.4, 0.6], vec![vec![0.0], vec![0.0]]).unwrap();
        let err = snap_observations(&obs, &grid).unwrap_err();
        assert!(err.to_string().contains("grid too coarse"));
        let obs2 = ObservationSet::new(vec![0.6, 1.4], vec![vec![0.0], vec![0.0]]).unwrap();
        assert!(matches!(
            snap_observations(&obs2, &grid),
            Err(Error::GridTooCoarse { node: 1, .. })
        ));

        // ties go to the later node: 0.25 -> 3, 0.85 -> 9
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let obs = ObservationSet::new(vec![0.25, 0.85], vec![vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(snap_observations(&obs, &grid).unwrap().obs_nodes(), &[3, 9]);
    }

    #[test]
    fn observations_outside_horizon_rejected() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let obs = ObservationSet::new(vec![0.0], vec![vec![0.0]]).unwrap();
        assert!(snap_observations(&obs, &grid).is_err());
        let obs = ObservationSet::new(vec![1.2], vec![vec![0.0]]).unwrap();
        assert!(snap_observations(&obs, &grid).is_err());
    }

    #[test]
    fn grid_rejects_fractional_horizon() {
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        let g = TimeGrid::new(35.0, 0.01).unwrap();
        assert_eq!(g.intervals(), 3500);
        assert_eq!(g.time(3500), 35.0);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn snapping_moves_at_most_half_a_step(
                steps in 10usize..500,
                fracs in proptest::collection::vec(0.0f64..1.0, 1..20),
            ) {
                let grid = TimeGrid::from_intervals(5.0, steps).unwrap();
                let mut times: Vec<f64> = fracs.iter().map(|f| 5.0 * f).filter(|t| *t > 0.0).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                times.dedup();
                let values = vec![vec![0.0]; times.len()];
                let obs = ObservationSet::new(times.clone(), values).unwrap();
                if let Ok(snapped) = snap_observations(&obs, &grid) {
                    for (t, &k) in times.iter().zip(snapped.obs_nodes()) {
                        prop_assert!((grid.time(k) - t).abs() <= 0.5 * grid.step() + 1e-9);
                    }
                }
            }

            #[test]
            fn exit_rate_is_negated_diagonal(rates in proptest::collection::vec(0.0f64..5.0, 9)) {
                let rows: Vec<Vec<f64>> = rates.chunks(3).map(|r| r.to_vec()).collect();
                let m = RateMatrix::from_rows(&rows).unwrap();
                for z in 0..3 {
                    prop_assert_eq!(m.exit_rate(z), -m.get(z, z));
                    let s: f64 = (0..3).map(|j| m.get(z, j)).sum();
                    prop_assert!(s.abs() <= SIMPLEX_TOL);
                }
            }
        }
    }
}

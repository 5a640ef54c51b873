//! Seeded samplers for ground-truth data: Gillespie and thinning samplers
//! for jump processes, Euler–Maruyama for switching and potential-driven
//! diffusions, Poisson observation designs and noisy observation.
//!
//! Every sampler owns a `ChaCha8Rng` seeded from a `u64`. Callers that need
//! several independent streams derive sub-seeds with [`mix_seed`], so a
//! whole experiment is reproducible from one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HybridModel, ObservationSet, RateMatrix, TimeGrid};

/// Derives the seed of sub-stream `stream` from a master seed.
///
/// SplitMix64 finalizer applied to `seed + (stream + 1) * φ`, where `φ` is
/// the 64-bit golden-ratio constant. Distinct streams of one master seed
/// never collide for `stream < 2^63`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Right-continuous piecewise-constant mode path on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpPath {
    pub z0: usize,
    pub jump_times: Vec<f64>,
    /// Mode entered at each jump.
    pub modes: Vec<usize>,
}

impl JumpPath {
    pub fn constant(z0: usize) -> Self {
        Self {
            z0,
            jump_times: Vec::new(),
            modes: Vec::new(),
        }
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    pub fn mode_at(&self, t: f64) -> usize {
        // number of jumps at or before t
        let idx = self.jump_times.partition_point(|&s| s <= t);
        if idx == 0 {
            self.z0
        } else {
            self.modes[idx - 1]
        }
    }

    /// Mode at every grid node.
    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<usize> {
        let mut out = Vec::with_capacity(grid.nodes());
        let mut j = 0;
        let mut z = self.z0;
        for k in 0..grid.nodes() {
            let t = grid.time(k);
            while j < self.jump_times.len() && self.jump_times[j] <= t {
                z = self.modes[j];
                j += 1;
            }
            out.push(z);
        }
        out
    }

    /// Completed sojourn lengths, paired with the mode they were spent in.
    pub fn holding_times(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.jump_times.len());
        let mut prev = 0.0;
        let mut z = self.z0;
        for (&t, &next) in self.jump_times.iter().zip(&self.modes) {
            out.push((z, t - prev));
            prev = t;
            z = next;
        }
        out
    }
}

/// State values on the nodes of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    pub dim: usize,
    pub values: Vec<Vec<f64>>,
}

impl StatePath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keeps every `stride`-th node, starting at node 0.
    pub fn subsample(&self, stride: usize) -> StatePath {
        StatePath {
            dim: self.dim,
            values: self.values.iter().step_by(stride).cloned().collect(),
        }
    }
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = p.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Doob–Gillespie sampler for a homogeneous jump process.
pub fn sample_mjp(rates: &RateMatrix, p0: &[f64], horizon: f64, seed: u64) -> JumpPath {
    let mut rng = rng_from_seed(seed);
    let z0 = sample_categorical(p0, &mut rng);
    gillespie_from(rates, z0, horizon, &mut rng)
}

fn gillespie_from(rates: &RateMatrix, z0: usize, horizon: f64, rng: &mut impl Rng) -> JumpPath {
    let k = rates.num_modes();
    let mut path = JumpPath::constant(z0);
    let mut t = 0.0;
    let mut z = z0;
    let mut weights = vec![0.0; k];
    loop {
        let exit = rates.exit_rate(z);
        if !(exit > 0.0) {
            break;
        }
        t += Exp::new(exit).expect("positive rate").sample(rng);
        if t > horizon {
            break;
        }
        for (j, w) in weights.iter_mut().enumerate() {
            *w = if j == z { 0.0 } else { rates.get(z, j) };
        }
        z = sample_categorical(&weights, rng);
        path.jump_times.push(t);
        path.modes.push(z);
    }
    path
}

/// Jump process with rates piecewise constant on grid intervals, sampled by
/// thinning against the largest exit rate on the grid.
///
/// `rates` holds one row-major `K x K` block per interval (off-diagonal
/// entries are read, the diagonal is ignored).
pub fn sample_mjp_inhomogeneous(rates: &[f64], k: usize, z0: usize, grid: &TimeGrid, seed: u64) -> Result<JumpPath> {
    let mut rng = rng_from_seed(seed);
    sample_thinned(rates, k, z0, grid, &mut rng)
}

pub(crate) fn sample_thinned(
    rates: &[f64],
    k: usize,
    z0: usize,
    grid: &TimeGrid,
    rng: &mut impl Rng,
) -> Result<JumpPath> {
    let m = grid.intervals();
    if rates.len() != m * k * k {
        return Err(Error::Dimension(format!(
            "rate schedule has {} entries, expected {}",
            rates.len(),
            m * k * k
        )));
    }
    let exit = |interval: usize, z: usize| -> f64 {
        let row = &rates[interval * k * k + z * k..interval * k * k + (z + 1) * k];
        row.iter().enumerate().filter(|(j, _)| *j != z).map(|(_, v)| *v).sum()
    };
    let mut bound = 0.0f64;
    for i in 0..m {
        for z in 0..k {
            let e = exit(i, z);
            if !e.is_finite() {
                return Err(Error::NonFinite {
                    what: "jump rates",
                    node: i,
                });
            }
            bound = bound.max(e);
        }
    }
    let mut path = JumpPath::constant(z0);
    if bound <= 0.0 {
        return Ok(path);
    }
    let proposal = Exp::new(bound).expect("positive bound");
    let horizon = grid.horizon();
    let h = grid.step();
    let mut weights = vec![0.0; k];
    let mut t = 0.0;
    let mut z = z0;
    loop {
        t += proposal.sample(rng);
        if t > horizon {
            break;
        }
        let interval = ((t / h) as usize).min(m - 1);
        let e = exit(interval, z);
        if rng.random::<f64>() * bound >= e {
            continue;
        }
        let row = &rates[interval * k * k + z * k..interval * k * k + (z + 1) * k];
        for (j, w) in weights.iter_mut().enumerate() {
            *w = if j == z { 0.0 } else { row[j] };
        }
        z = sample_categorical(&weights, rng);
        path.jump_times.push(t);
        path.modes.push(z);
    }
    Ok(path)
}

/// Euler–Maruyama driver on a grid.
///
/// `drift(k, y, out)` writes the drift at node `k`; `noise(k)` returns the
/// lower Cholesky factor of the increment covariance over interval `k`.
pub(crate) fn euler_maruyama<'a>(
    y0: &[f64],
    grid: &TimeGrid,
    mut drift: impl FnMut(usize, &[f64], &mut [f64]),
    noise: impl Fn(usize) -> &'a [f64],
    rng: &mut impl Rng,
) -> StatePath {
    let n = y0.len();
    let h = grid.step();
    let mut values = Vec::with_capacity(grid.nodes());
    let mut y = y0.to_vec();
    let mut f = vec![0.0; n];
    let mut xi = vec![0.0; n];
    values.push(y.clone());
    for k in 0..grid.intervals() {
        drift(k, &y, &mut f);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let l = noise(k);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..=i {
                s += l[i * n + j] * xi[j];
            }
            y[i] += f[i] * h + s;
        }
        values.push(y.clone());
    }
    StatePath { dim: n, values }
}

fn increment_factors(dispersion: &[Vec<f64>], n: usize, h: f64) -> Result<Vec<Vec<f64>>> {
    dispersion
        .iter()
        .enumerate()
        .map(|(z, d)| {
            let scaled: Vec<f64> = d.iter().map(|v| v * h).collect();
            linalg::cholesky(&scaled, n)
                .ok_or_else(|| Error::NotPositiveDefinite(format!("dispersion of mode {}", z + 1)))
        })
        .collect()
}

/// Euler–Maruyama for the switching linear diffusion along a given mode
/// path. The mode in force over `[t_k, t_{k+1})` is the one at `t_k`.
pub fn sample_ssde(model: &HybridModel, jumps: &JumpPath, y0: &[f64], grid: &TimeGrid, seed: u64) -> Result<StatePath> {
    let n = model.state_dim;
    if y0.len() != n {
        return Err(Error::Dimension(format!("initial state has length {}, expected {n}", y0.len())));
    }
    let chol = increment_factors(&model.dispersion, n, grid.step())?;
    let modes = jumps.on_grid(grid);
    let mut rng = rng_from_seed(seed);
    Ok(euler_maruyama(
        y0,
        grid,
        |k, y, out| model.drift[modes[k]].eval(y, out),
        |k| chol[modes[k]].as_slice(),
        &mut rng,
    ))
}

/// A full ground-truth draw from a hybrid model: initial mode and state from
/// the initial law, a Gillespie mode path, and Euler–Maruyama at
/// `substeps` internal steps per grid interval, reported on `grid`.
pub fn sample_hybrid(model: &HybridModel, grid: &TimeGrid, substeps: usize, seed: u64) -> Result<(JumpPath, StatePath)> {
    let substeps = substeps.max(1);
    let mut rng = rng_from_seed(mix_seed(seed, 0));
    let z0 = sample_categorical(&model.initial.p0, &mut rng);
    let n = model.state_dim;
    let l0 = linalg::cholesky(&model.initial.cov[z0], n)
        .ok_or_else(|| Error::NotPositiveDefinite(format!("initial covariance of mode {}", z0 + 1)))?;
    let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut y0 = model.initial.mean[z0].clone();
    for i in 0..n {
        for j in 0..=i {
            y0[i] += l0[i * n + j] * xi[j];
        }
    }
    let jumps = gillespie_from(&model.rates, z0, grid.horizon(), &mut rng_from_seed(mix_seed(seed, 1)));
    let fine = TimeGrid::from_intervals(grid.horizon(), grid.intervals() * substeps)?;
    let path = sample_ssde(model, &jumps, &y0, &fine, mix_seed(seed, 2))?;
    Ok((jumps, path.subsample(substeps)))
}

/// Benchmark potentials whose negative gradient drives the metastable
/// ground-truth diffusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    /// `V(y) = 4 (y^8 + 3 e^{-80 y^2} + 2.5 e^{-80 (y-0.5)^2} + 2.5 e^{-80 (y+0.5)^2})`
    #[serde(rename = "four_well_1d")]
    FourWell1d,
    /// `V(y) = 3 e^{-y1^2-(y2-1/3)^2} - 3 e^{-y1^2-(y2-5/3)^2} - 5 e^{-(y1-1)^2-y2^2}
    ///       - 5 e^{-(y1+1)^2-y2^2} + 0.2 y1^4 + 0.2 (y2-1/3)^4`
    #[serde(rename = "three_well_2d")]
    ThreeWell2d,
}

impl Potential {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "four_well_1d" => Some(Self::FourWell1d),
            "three_well_2d" => Some(Self::ThreeWell2d),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FourWell1d => "four_well_1d",
            Self::ThreeWell2d => "three_well_2d",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::FourWell1d => 1,
            Self::ThreeWell2d => 2,
        }
    }

    pub fn value(self, y: &[f64]) -> f64 {
        match self {
            Self::FourWell1d => {
                let x = y[0];
                4.0 * (x.powi(8)
                    + 3.0 * (-80.0 * x * x).exp()
                    + 2.5 * (-80.0 * (x - 0.5).powi(2)).exp()
                    + 2.5 * (-80.0 * (x + 0.5).powi(2)).exp())
            }
            Self::ThreeWell2d => {
                let (a, b) = (y[0], y[1]);
                let c = 1.0 / 3.0;
                3.0 * (-a * a - (b - c).powi(2)).exp() - 3.0 * (-a * a - (b - 5.0 * c).powi(2)).exp()
                    - 5.0 * (-(a - 1.0).powi(2) - b * b).exp()
                    - 5.0 * (-(a + 1.0).powi(2) - b * b).exp()
                    + 0.2 * a.powi(4)
                    + 0.2 * (b - c).powi(4)
            }
        }
    }

    /// Analytic gradient `∇V(y)`.
    pub fn gradient(self, y: &[f64], out: &mut [f64]) {
        match self {
            Self::FourWell1d => {
                let x = y[0];
                let g0 = 3.0 * (-80.0 * x * x).exp() * (-160.0 * x);
                let g1 = 2.5 * (-80.0 * (x - 0.5).powi(2)).exp() * (-160.0 * (x - 0.5));
                let g2 = 2.5 * (-80.0 * (x + 0.5).powi(2)).exp() * (-160.0 * (x + 0.5));
                out[0] = 4.0 * (8.0 * x.powi(7) + g0 + g1 + g2);
            }
            Self::ThreeWell2d => {
                let (a, b) = (y[0], y[1]);
                let c = 1.0 / 3.0;
                let e1 = 3.0 * (-a * a - (b - c).powi(2)).exp();
                let e2 = -3.0 * (-a * a - (b - 5.0 * c).powi(2)).exp();
                let e3 = -5.0 * (-(a - 1.0).powi(2) - b * b).exp();
                let e4 = -5.0 * (-(a + 1.0).powi(2) - b * b).exp();
                out[0] = e1 * (-2.0 * a) + e2 * (-2.0 * a) + e3 * (-2.0 * (a - 1.0)) + e4 * (-2.0 * (a + 1.0))
                    + 0.8 * a.powi(3);
                out[1] = e1 * (-2.0 * (b - c))
                    + e2 * (-2.0 * (b - 5.0 * c))
                    + e3 * (-2.0 * b)
                    + e4 * (-2.0 * b)
                    + 0.8 * (b - c).powi(3);
            }
        }
    }
}

impl Potential {
    /// Local minimum reached from `y` by backtracking gradient descent.
    pub fn descend(self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = y.to_vec();
        let mut g = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut step = 1e-3;
        let mut v = self.value(&x);
        for _ in 0..100_000 {
            self.gradient(&x, &mut g);
            if g.iter().map(|c| c * c).sum::<f64>().sqrt() < 1e-9 {
                break;
            }
            loop {
                for i in 0..n {
                    trial[i] = x[i] - step * g[i];
                }
                let vt = self.value(&trial);
                if vt < v {
                    x.copy_from_slice(&trial);
                    v = vt;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
                if step < 1e-14 {
                    return x;
                }
            }
        }
        x
    }

    fn is_local_minimum(self, y: &[f64]) -> bool {
        let v = self.value(y);
        let n = self.dim();
        let mut probe = y.to_vec();
        // axis and diagonal directions catch saddles as well as maxima
        (0..3usize.pow(n as u32)).all(|code| {
            let mut c = code;
            for i in 0..n {
                probe[i] = y[i] + 1e-3 * ((c % 3) as f64 - 1.0);
                c /= 3;
            }
            code == (3usize.pow(n as u32) - 1) / 2 || self.value(&probe) > v
        })
    }

    /// Local minima, sorted lexicographically.
    pub fn wells(self) -> Vec<Vec<f64>> {
        let starts: Vec<Vec<f64>> = match self {
            Self::FourWell1d => (0..=40).map(|i| vec![-1.2 + 0.06 * i as f64]).collect(),
            Self::ThreeWell2d => (0..=20)
                .flat_map(|i| (0..=20).map(move |j| vec![-2.0 + 0.2 * i as f64, -1.0 + 0.15 * j as f64]))
                .collect(),
        };
        let mut wells: Vec<Vec<f64>> = Vec::new();
        for s in starts {
            let m = self.descend(&s);
            if !self.is_local_minimum(&m) {
                continue;
            }
            if !wells.iter().any(|w| linalg::dist(w, &m) < 1e-3) {
                wells.push(m);
            }
        }
        wells.sort_by(|a, b| a.partial_cmp(b).expect("finite minima"));
        wells
    }

    /// Index into [`Potential::wells`] of the basin containing `y`.
    pub fn basin(self, wells: &[Vec<f64>], y: &[f64]) -> usize {
        let m = self.descend(y);
        let mut best = (f64::INFINITY, 0);
        for (i, w) in wells.iter().enumerate() {
            let d = linalg::dist(w, &m);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// Euler–Maruyama for `dY = -∇V(Y) dt + chol(D) dW`.
pub fn sample_nonlinear_sde(
    potential: Potential,
    dispersion: &[f64],
    y0: &[f64],
    grid: &TimeGrid,
    seed: u64,
) -> Result<StatePath> {
    let n = potential.dim();
    if y0.len() != n || dispersion.len() != n * n {
        return Err(Error::Dimension(format!(
            "{} needs a {n}-dimensional state and {n} x {n} dispersion",
            potential.name()
        )));
    }
    let chol = increment_factors(&[dispersion.to_vec()], n, grid.step())?;
    let mut rng = rng_from_seed(seed);
    Ok(euler_maruyama(
        y0,
        grid,
        |_, y, out| {
            potential.gradient(y, out);
            out.iter_mut().for_each(|v| *v = -*v);
        },
        |_| chol[0].as_slice(),
        &mut rng,
    ))
}

/// Homogeneous Poisson event times on `(0, T]`.
pub fn sample_observation_times(intensity: f64, horizon: f64, seed: u64) -> Vec<f64> {
    let mut out = Vec::new();
    if !(horizon > 0.0) || !(intensity > 0.0) {
        return out;
    }
    let mut rng = rng_from_seed(seed);
    let gap = Exp::new(intensity).expect("positive intensity");
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t > horizon {
            return out;
        }
        out.push(t);
    }
}

/// Regularly spaced times `gap, 2 gap, ...` up to `T`.
pub fn regular_observation_times(gap: f64, horizon: f64) -> Vec<f64> {
    let count = (horizon / gap + 1e-9).floor() as usize;
    (1..=count).map(|i| i as f64 * gap).collect()
}

/// Drops times that would share a grid node with an earlier time or snap
/// onto the initial node, so the remainder snaps injectively.
pub fn thin_to_grid(times: &[f64], grid: &TimeGrid) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut last = 0;
    for &t in times {
        let node = grid.nearest_node(t);
        if node > last {
            out.push(t);
            last = node;
        }
    }
    out
}

/// Noisy observations `x_i = y(t_i) + η_i`, `η_i ~ N(0, Σ_obs)`, with `y`
/// read at the grid node nearest to `t_i`.
pub fn observe(path: &StatePath, grid: &TimeGrid, times: &[f64], obs_cov: &[f64], seed: u64) -> Result<ObservationSet> {
    let n = path.dim;
    let l = linalg::cholesky(obs_cov, n).ok_or_else(|| Error::NotPositiveDefinite("observation covariance".into()))?;
    if path.len() != grid.nodes() {
        return Err(Error::Dimension(format!(
            "path has {} nodes, grid has {}",
            path.len(),
            grid.nodes()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        if !(t >= 0.0) || t > grid.horizon() * (1.0 + 1e-12) {
            return Err(Error::ObservationOutOfRange {
                time: t,
                horizon: grid.horizon(),
            });
        }
        let y = &path.values[grid.nearest_node(t)];
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = y.clone();
        for i in 0..n {
            for j in 0..=i {
                x[i] += l[i * n + j] * xi[j];
            }
        }
        values.push(x);
    }
    ObservationSet::new(times.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialLaw, LinearDrift};

    fn ou_model(alpha: f64, beta: f64, d: f64) -> HybridModel {
        HybridModel::new(
            RateMatrix::zeros(1),
            vec![LinearDrift::from_alpha_beta(&[alpha], &[beta])],
            vec![vec![d]],
            InitialLaw {
                p0: vec![1.0],
                mean: vec![vec![0.0]],
                cov: vec![vec![1.0]],
            },
            vec![0.1],
        )
        .unwrap()
    }

    #[test]
    fn zero_rates_never_jump() {
        let path = sample_mjp(&RateMatrix::zeros(3), &[1.0, 0.0, 0.0], 100.0, 7);
        assert_eq!(path.z0, 0);
        assert_eq!(path.num_jumps(), 0);
        assert_eq!(path.mode_at(50.0), 0);
    }

    #[test]
    fn mean_holding_time_matches_rate() {
        let rates = RateMatrix::uniform(2, 0.2);
        let mut samples = Vec::new();
        let mut s = 0;
        while samples.len() < 10_000 {
            let path = sample_mjp(&rates, &[0.5, 0.5], 1_000.0, mix_seed(11, s));
            samples.extend(path.holding_times().into_iter().map(|(_, h)| h));
            s += 1;
        }
        samples.truncate(10_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let se = 5.0 / (samples.len() as f64).sqrt();
        assert!((mean - 5.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn occupancy_matches_stationary_law() {
        // rate 1 out of mode 1, rate 3 out of mode 2: mode 1 holds 3/4 of the time
        let rates = RateMatrix::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0]]).unwrap();
        let horizon = 1e4;
        let path = sample_mjp(&rates, &[1.0, 0.0], horizon, 3);
        let mut occupied = 0.0;
        let mut prev = 0.0;
        let mut z = path.z0;
        for (&t, &next) in path.jump_times.iter().zip(&path.modes) {
            if z == 0 {
                occupied += t - prev;
            }
            prev = t;
            z = next;
        }
        if z == 0 {
            occupied += horizon - prev;
        }
        let frac = occupied / horizon;
        // asymptotic variance of a two-state occupancy fraction:
        // 2 a b / (a + b)^3 / T
        let (a, b) = (1.0f64, 3.0f64);
        let se = (2.0 * a * b / (a + b).powi(3) / horizon).sqrt();
        assert!((frac - 0.75).abs() < 3.0 * se, "fraction {frac}, se {se}");
    }

    #[test]
    fn thinning_respects_zero_intensity_window() {
        let grid = TimeGrid::new(10.0, 0.1).unwrap();
        let k = 2;
        let mut rates = vec![0.0; grid.intervals() * k * k];
        for i in 50..grid.intervals() {
            rates[i * 4 + 1] = 2.0;
            rates[i * 4 + 2] = 2.0;
        }
        for s in 0..10_000 {
            let path = sample_mjp_inhomogeneous(&rates, k, 0, &grid, s).unwrap();
            assert!(path.jump_times.iter().all(|&t| t >= 5.0));
        }
        let zero = vec![0.0; grid.intervals() * k * k];
        assert_eq!(sample_mjp_inhomogeneous(&zero, k, 1, &grid, 0).unwrap().num_jumps(), 0);
        let mut bad = zero.clone();
        bad[1] = f64::NAN;
        assert!(sample_mjp_inhomogeneous(&bad, k, 0, &grid, 0).is_err());
    }

    #[test]
    fn near_degenerate_diffusion_barely_moves() {
        let model = HybridModel::new(
            RateMatrix::zeros(1),
            vec![LinearDrift::new(vec![0.0], vec![0.0])],
            vec![vec![1e-12]],
            InitialLaw {
                p0: vec![1.0],
                mean: vec![vec![0.0]],
                cov: vec![vec![1.0]],
            },
            vec![1.0],
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let path = sample_ssde(&model, &JumpPath::constant(0), &[2.0], &grid, 1).unwrap();
        assert!(path.values.iter().all(|y| (y[0] - 2.0).abs() < 1e-4));
    }

    #[test]
    fn ssde_is_seed_deterministic() {
        let model = ou_model(1.5, 1.0, 0.25);
        let grid = TimeGrid::new(5.0, 0.01).unwrap();
        let jumps = JumpPath::constant(0);
        let a = sample_ssde(&model, &jumps, &[0.0], &grid, 42).unwrap();
        let b = sample_ssde(&model, &jumps, &[0.0], &grid, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_ssde(&model, &jumps, &[0.0], &grid, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ou_stationary_moments() {
        let model = ou_model(1.5, 1.0, 0.25);
        let grid = TimeGrid::new(20.0, 0.01).unwrap();
        let jumps = JumpPath::constant(0);
        let n = 10_000;
        let ys: Vec<f64> = (0..n)
            .map(|i| sample_ssde(&model, &jumps, &[0.0], &grid, mix_seed(5, i)).unwrap().values[grid.intervals()][0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // Euler–Maruyama stationary variance for an OU process is D / (2α - α² h)
        let h = grid.step();
        let want_var = 0.25 / (2.0 * 1.5 - 1.5 * 1.5 * h);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "var {var}");
        assert!((var - 0.25 / 3.0).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn four_well_is_stationary_at_origin() {
        let mut g = [0.0];
        Potential::FourWell1d.gradient(&[0.0], &mut g);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn three_well_minimum_is_critical() {
        // coarse grid search then gradient descent to polish
        let p = Potential::ThreeWell2d;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=300 {
            for j in 0..=300 {
                let y = [-2.0 + 4.0 * i as f64 / 300.0, -1.5 + 3.5 * j as f64 / 300.0];
                let v = p.value(&y);
                if v < best.0 {
                    best = (v, y);
                }
            }
        }
        let mut y = best.1;
        let mut g = [0.0; 2];
        for _ in 0..20_000 {
            p.gradient(&y, &mut g);
            y[0] -= 0.05 * g[0];
            y[1] -= 0.05 * g[1];
        }
        p.gradient(&y, &mut g);
        assert!(g[0].hypot(g[1]) < 1e-6, "{g:?} at {y:?}");
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng_from_seed(9);
        for p in [Potential::FourWell1d, Potential::ThreeWell2d] {
            let n = p.dim();
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.2..1.2)).collect();
                let mut g = vec![0.0; n];
                p.gradient(&y, &mut g);
                for i in 0..n {
                    let step = 1e-6;
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[i] += step;
                    ym[i] -= step;
                    let fd = (p.value(&yp) - p.value(&ym)) / (2.0 * step);
                    let rel = (fd - g[i]).abs() / g[i].abs().max(1.0);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-5, "{}: {worst}", p.name());
        }
    }

    #[test]
    fn nonlinear_sde_checks_dimensions() {
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        assert!(sample_nonlinear_sde(Potential::ThreeWell2d, &[0.1], &[0.0], &grid, 0).is_err());
        let path = sample_nonlinear_sde(Potential::FourWell1d, &[0.01], &[0.75], &grid, 0).unwrap();
        assert_eq!(path.len(), grid.nodes());
    }

    #[test]
    fn observation_count_is_poisson() {
        let reps = 1_000;
        let counts: Vec<f64> = (0..reps)
            .map(|i| sample_observation_times(1.0 / 0.35, 35.0, mix_seed(1, i)).len() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / reps as f64;
        let se = (100.0f64 / reps as f64).sqrt();
        assert!((mean - 100.0).abs() < 3.0 * se, "mean count {mean}");
        assert!(sample_observation_times(2.0, 0.0, 0).is_empty());
    }

    #[test]
    fn vanishing_noise_returns_path() {
        let model = ou_model(1.5, 1.0, 0.25);
        let grid = TimeGrid::new(5.0, 0.01).unwrap();
        let path = sample_ssde(&model, &JumpPath::constant(0), &[0.0], &grid, 4).unwrap();
        let times = vec![0.5, 1.234, 4.0];
        let obs = observe(&path, &grid, &times, &[1e-12], 8).unwrap();
        for (t, x) in times.iter().zip(obs.values()) {
            assert!((x[0] - path.values[grid.nearest_node(*t)][0]).abs() < 1e-5);
        }
        assert_eq!(obs, observe(&path, &grid, &times, &[1e-12], 8).unwrap());
    }

    #[test]
    fn thinning_to_grid_keeps_snappable_times() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let kept = thin_to_grid(&[0.01, 0.12, 0.14, 0.31, 0.35], &grid);
        assert_eq!(kept, vec![0.12, 0.31, 0.35]);
    }

    #[test]
    fn seed_mixing_separates_streams() {
        let seeds: Vec<u64> = (0..1000).map(|i| mix_seed(123, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_eq!(mix_seed(123, 5), mix_seed(123, 5));
    }

    #[test]
    fn potentials_have_the_expected_wells() {
        let w = Potential::FourWell1d.wells();
        assert_eq!(w.len(), 4, "{w:?}");
        assert!((w[0][0] + 0.739).abs() < 1e-2 && (w[1][0] + 0.252).abs() < 1e-2);
        let w = Potential::ThreeWell2d.wells();
        assert_eq!(w.len(), 3, "{w:?}");
        // two deep wells near (±1, 0), one shallow near (0, 1.5)
        assert!(w[0][0] < -0.5 && w[2][0] > 0.5 && w[1][1] > 1.0);
        assert_eq!(Potential::ThreeWell2d.basin(&w, &[0.9, 0.1]), 2);
        assert_eq!(Potential::FourWell1d.basin(&Potential::FourWell1d.wells(), &[0.3]), 2);
    }
}

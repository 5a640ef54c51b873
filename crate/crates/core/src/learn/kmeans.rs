use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{HybridModel, InitialLaw, LinearDrift, ObservationSet, RateMatrix};
use crate::simulate::{mix_seed, rng_from_seed};

const MAX_ITER: usize = 100;
const MAX_RESEEDS: u64 = 10;

/// Result of Lloyd's algorithm. Clusters are ordered lexicographically by
/// centre so the labelling does not depend on the seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centres: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.centres.len()];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centres.iter().enumerate() {
        let d = dist2(x, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by at most 100 Lloyd iterations.
fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> Option<Clustering> {
    let mut rng = rng_from_seed(seed);
    let n = points.len();
    let mut centres = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|d| {
                    acc += d;
                    acc > u
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centres.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centres[centres.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let c = nearest(p, &centres).0;
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for ((c, s), &m) in centres.iter_mut().zip(sums).zip(&counts) {
            *c = s.into_iter().map(|v| v / m as f64).collect();
        }
        if !changed {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centres[a].partial_cmp(&centres[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    Some(Clustering {
        centres: order.iter().map(|&c| centres[c].clone()).collect(),
        labels: labels.iter().map(|&l| rank[l]).collect(),
    })
}

/// Clusters `points` into `k` groups, re-seeding up to ten times if a
/// cluster empties.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || points.len() < k {
        return Err(Error::KMeans(format!("need at least {k} points, got {}", points.len())));
    }
    for attempt in 0..MAX_RESEEDS {
        if let Some(c) = lloyd(points, k, mix_seed(seed, attempt)) {
            return Ok(c);
        }
    }
    Err(Error::KMeans(format!("a cluster stayed empty after {MAX_RESEEDS} seedings")))
}

fn covariance(points: &[&Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let n = mean.len();
    let mut out = vec![0.0; n * n];
    for p in points {
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] += (p[r] - mean[r]) * (p[c] - mean[c]);
            }
        }
    }
    let m = points.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= m);
    out
}

/// Initial model from clustered observations: set points and initial means
/// at the cluster centres, initial covariances from each cluster, the pooled
/// within-cluster covariance as both dispersion and observation covariance,
/// `A_p = -I`, uniform initial mode weights and off-diagonal rates
/// `init_rate`.
pub fn init_kmeans(obs: &ObservationSet, k: usize, seed: u64, init_rate: f64) -> Result<HybridModel> {
    let points = obs.values();
    let n = obs.dim().ok_or_else(|| Error::KMeans("no observations".into()))?;
    let clusters = kmeans(points, k, seed)?;
    let floor = {
        let all: Vec<&Vec<f64>> = points.iter().collect();
        let mean: Vec<f64> = (0..n).map(|i| all.iter().map(|p| p[i]).sum::<f64>() / all.len() as f64).collect();
        let g = covariance(&all, &mean);
        1e-6 * (0..n).map(|i| g[i * n + i]).fold(0.0f64, f64::max).max(1e-12)
    };
    let mut pooled = vec![0.0; n * n];
    let mut covs = Vec::with_capacity(k);
    for (z, centre) in clusters.centres.iter().enumerate() {
        let members: Vec<&Vec<f64>> = points.iter().zip(&clusters.labels).filter(|(_, &l)| l == z).map(|(p, _)| p).collect();
        let c = covariance(&members, centre);
        for (p, v) in pooled.iter_mut().zip(&c) {
            *p += v * members.len() as f64 / points.len() as f64;
        }
        covs.push(crate::linalg::floor_spectrum(&c, n, floor));
    }
    let pooled = crate::linalg::floor_spectrum(&pooled, n, floor);
    let mut identity = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = -1.0;
    }
    HybridModel::new(
        RateMatrix::uniform(k, if k > 1 { init_rate } else { 0.0 }),
        clusters
            .centres
            .iter()
            .map(|c| LinearDrift::new(identity.clone(), c.clone()))
            .collect(),
        vec![pooled.clone(); k],
        InitialLaw {
            p0: vec![1.0 / k as f64; k],
            mean: clusters.centres.clone(),
            cov: covs,
        },
        pooled,
    )
}

#![allow(dead_code)]

use hybrid_vi::model::{HybridModel, InitialLaw, LinearDrift, ObservationSet, RateMatrix, TimeGrid};
use hybrid_vi::simulate::{mix_seed, rng_from_seed};
use hybrid_vi::smoother::VariationalControls;
use rand::Rng;

/// The two-mode switching OU process with set points ±1.
pub fn two_mode(rate: f64) -> HybridModel {
    HybridModel::new(
        RateMatrix::uniform(2, rate),
        vec![
            LinearDrift::from_alpha_beta(&[1.5], &[-1.0]),
            LinearDrift::from_alpha_beta(&[1.5], &[1.0]),
        ],
        vec![vec![0.25], vec![0.25]],
        InitialLaw {
            p0: vec![0.4, 0.6],
            mean: vec![vec![-1.0], vec![1.0]],
            cov: vec![vec![0.2], vec![0.2]],
        },
        vec![0.1],
    )
    .unwrap()
}

pub fn ou(alpha: f64, beta: f64, d: f64, obs_var: f64) -> HybridModel {
    HybridModel::new(
        RateMatrix::zeros(1),
        vec![LinearDrift::from_alpha_beta(&[alpha], &[beta])],
        vec![vec![d]],
        InitialLaw {
            p0: vec![1.0],
            mean: vec![vec![0.0]],
            cov: vec![vec![0.3]],
        },
        vec![obs_var],
    )
    .unwrap()
}

pub fn three_obs() -> ObservationSet {
    ObservationSet::new(vec![0.21, 0.55, 0.87], vec![vec![-0.8], vec![0.4], vec![1.1]]).unwrap()
}

/// Controls away from the prior: smooth per-interval wiggles plus random
/// initial conditions.
pub fn perturbed_controls(model: &HybridModel, grid: &TimeGrid, seed: u64) -> VariationalControls {
    let mut c = VariationalControls::from_prior(model, grid);
    let mut rng = rng_from_seed(mix_seed(seed, 77));
    let (k, n) = (c.modes, c.dim);
    let phase: Vec<f64> = (0..4 * k).map(|_| rng.random_range(0.0..6.0)).collect();
    for i in 0..c.intervals {
        let t = grid.time(i);
        for z in 0..k {
            for e in 0..n * n {
                c.a[(i * k + z) * n * n + e] += 0.3 * (2.0 * t + phase[4 * z]).sin();
            }
            for e in 0..n {
                c.b[(i * k + z) * n + e] += 0.4 * (3.0 * t + phase[4 * z + 1]).cos();
            }
            for w in 0..k {
                if w != z {
                    let base = c.rates[(i * k + z) * k + w];
                    c.rates[(i * k + z) * k + w] = base * (1.0 + 0.5 * (t * 4.0 + phase[4 * z + 2]).sin()) + 0.05;
                }
            }
        }
    }
    c.normalize_rates(1e-8);
    for z in 0..k {
        for e in 0..n {
            c.mu0[z * n + e] += rng.random_range(-0.3..0.3);
        }
        for r in 0..n {
            c.sigma0[z * n * n + r * n + r] *= rng.random_range(0.6..1.5);
        }
    }
    if k > 1 {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        c.q0 = w.iter().map(|v| v / s).collect();
    }
    c
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

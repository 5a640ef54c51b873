//! Reconstruction metrics against a known ground truth.

use hybrid_vi::smoother::VariationalMarginals;
use statrs::distribution::{ContinuousCDF, Normal};

/// Fraction of nodes where the predicted mode matches the true one, under
/// the label matching that maximizes agreement (learned modes carry no
/// intrinsic labels). Labels beyond the smaller label set stay unmatched.
pub fn mode_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mode paths differ in length");
    if pred.is_empty() {
        return f64::NAN;
    }
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    let best = if kp <= 8 && kt <= 8 {
        best_matching(&confusion, 0, &mut vec![false; kt])
    } else {
        (0..kp.min(kt)).map(|i| confusion[i][i]).sum()
    };
    best as f64 / pred.len() as f64
}

fn best_matching(c: &[Vec<usize>], row: usize, used: &mut [bool]) -> usize {
    if row == c.len() {
        return 0;
    }
    // leaving this predicted label unmatched is always allowed
    let mut best = best_matching(c, row + 1, used);
    for col in 0..used.len() {
        if !used[col] {
            used[col] = true;
            best = best.max(c[row][col] + best_matching(c, row + 1, used));
            used[col] = false;
        }
    }
    best
}

/// Root mean squared error over nodes and coordinates.
pub fn rmse(estimate: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "paths differ in length");
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, t) in estimate.iter().zip(truth) {
        for (a, b) in e.iter().zip(t) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    (sum / count as f64).sqrt()
}

/// Central interval of a one-dimensional Gaussian mixture.
pub fn mixture_interval(weights: &[f64], means: &[f64], vars: &[f64], level: f64) -> (f64, f64) {
    let comps: Vec<(f64, Normal)> = weights
        .iter()
        .zip(means.iter().zip(vars))
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, (m, v))| (*w, Normal::new(*m, v.max(1e-300).sqrt()).expect("finite moments")))
        .collect();
    let total: f64 = comps.iter().map(|c| c.0).sum();
    let cdf = |x: f64| comps.iter().map(|(w, d)| w * d.cdf(x)).sum::<f64>() / total;
    let lo_all = comps.iter().map(|(_, d)| d.inverse_cdf(1e-12)).fold(f64::INFINITY, f64::min);
    let hi_all = comps.iter().map(|(_, d)| d.inverse_cdf(1.0 - 1e-12)).fold(f64::NEG_INFINITY, f64::max);
    let quantile = |p: f64| {
        let (mut lo, mut hi) = (lo_all, hi_all);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let tail = 0.5 * (1.0 - level);
    (quantile(tail), quantile(1.0 - tail))
}

/// Fraction of (node, coordinate) pairs whose true value lies inside the
/// central `level` interval of the coordinate's mixture marginal.
pub fn coverage(marg: &VariationalMarginals, truth: &[Vec<f64>], level: f64) -> f64 {
    let (k, n) = (marg.modes, marg.dim);
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut means = vec![0.0; k];
    let mut vars = vec![0.0; k];
    for (node, y) in truth.iter().enumerate().take(marg.nodes) {
        for i in 0..n {
            for z in 0..k {
                means[z] = marg.mu(node, z)[i];
                vars[z] = marg.sigma(node, z)[i * n + i];
            }
            let (lo, hi) = mixture_interval(marg.q(node), &means, &vars, level);
            if y[i] >= lo && y[i] <= hi {
                hits += 1;
            }
            total += 1;
        }
    }
    hits as f64 / total as f64
}

/// Modes that are the MAP mode on at least `min_fraction` of the nodes.
pub fn occupied_modes(map_modes: &[usize], modes: usize, min_fraction: f64) -> usize {
    let mut counts = vec![0usize; modes];
    for &z in map_modes {
        counts[z] += 1;
    }
    counts
        .iter()
        .filter(|&&c| c as f64 >= min_fraction * map_modes.len() as f64)
        .count()
}

//! Exact continuous-discrete Kalman filter and Rauch–Tung–Striebel smoother
//! for a single-mode linear model, evaluated on grid nodes.
//!
//! Transitions over one grid step are exact: the affine part comes from the
//! exponential of the augmented drift `[[A, b], [0, 0]]`, the process noise
//! from Van Loan's block exponential.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{snap_observations, HybridModel, ObservationSet, TimeGrid};

/// Exact Gaussian smoothing marginals on grid nodes.
#[derive(Debug, Clone)]
pub struct GaussianSmoothing {
    pub mean: Vec<Vec<f64>>,
    /// Row-major covariances.
    pub cov: Vec<Vec<f64>>,
    /// Filtering means and covariances (after the update at observation
    /// nodes).
    pub filter_mean: Vec<Vec<f64>>,
    pub filter_cov: Vec<Vec<f64>>,
    /// `ln p(x_1, ..., x_N)`.
    pub log_evidence: f64,
}

/// One exact step `y' = F y + c + ξ`, `ξ ~ N(0, Q)`.
pub struct ExactTransition {
    pub f: DMatrix<f64>,
    pub c: Vec<f64>,
    pub q: DMatrix<f64>,
}

pub fn exact_transition(a: &[f64], b: &[f64], d: &[f64], h: f64) -> ExactTransition {
    let n = b.len();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            aug[(i, j)] = a[i * n + j] * h;
        }
        aug[(i, n)] = b[i] * h;
    }
    let e = aug.exp();
    let f = e.view((0, 0), (n, n)).into_owned();
    let c = (0..n).map(|i| e[(i, n)]).collect();

    let mut vl = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            vl[(i, j)] = -a[i * n + j] * h;
            vl[(i, n + j)] = d[i * n + j] * h;
            vl[(n + i, n + j)] = a[j * n + i] * h;
        }
    }
    let g = vl.exp();
    let g12 = g.view((0, n), (n, n)).into_owned();
    let g22 = g.view((n, n), (n, n)).into_owned();
    let q = g22.transpose() * g12;
    let q = 0.5 * (&q + q.transpose());
    ExactTransition { f, c, q }
}

fn vec_of(m: &DMatrix<f64>) -> Vec<f64> {
    linalg::to_flat(m)
}

/// Exact smoothing marginals of a single-mode model at every grid node.
pub fn gaussian_smoother_1mode(model: &HybridModel, obs: &ObservationSet, grid: &TimeGrid) -> Result<GaussianSmoothing> {
    if model.num_modes() != 1 {
        return Err(Error::InvalidModel("the exact Gaussian smoother needs a single mode".into()));
    }
    let n = model.state_dim;
    let grid = snap_observations(obs, grid)?;
    let tr = exact_transition(&model.drift[0].a, &model.drift[0].b, &model.dispersion[0], grid.step());
    let r = linalg::from_flat(&model.obs_cov, n);
    let mut obs_at = vec![None; grid.nodes()];
    for (i, &k) in grid.obs_nodes().iter().enumerate() {
        obs_at[k] = Some(i);
    }

    let nodes = grid.nodes();
    let mut pred_m = Vec::with_capacity(nodes);
    let mut pred_p = Vec::with_capacity(nodes);
    let mut filt_m: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(nodes);
    let mut filt_p: Vec<DMatrix<f64>> = Vec::with_capacity(nodes);
    let mut log_evidence = 0.0;
    let c = nalgebra::DVector::from_column_slice(&tr.c);
    for k in 0..nodes {
        let (m, p) = if k == 0 {
            (
                nalgebra::DVector::from_column_slice(&model.initial.mean[0]),
                linalg::from_flat(&model.initial.cov[0], n),
            )
        } else {
            (&tr.f * &filt_m[k - 1] + &c, &tr.f * &filt_p[k - 1] * tr.f.transpose() + &tr.q)
        };
        pred_m.push(m.clone());
        pred_p.push(p.clone());
        let (m, p) = match obs_at[k] {
            Some(i) => {
                let x = nalgebra::DVector::from_column_slice(&obs.values()[i]);
                let s = &p + &r;
                let chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite("innovation covariance".into()))?;
                let innov = &x - &m;
                let sinv_innov = chol.solve(&innov);
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                log_evidence += -0.5
                    * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + innov.dot(&sinv_innov));
                let gain = chol.solve(&p).transpose();
                let m2 = &m + &gain * innov;
                let p2 = &p - &gain * &p;
                (m2, 0.5 * (&p2 + p2.transpose()))
            }
            None => (m, p),
        };
        filt_m.push(m);
        filt_p.push(p);
    }

    let mut sm = filt_m.clone();
    let mut sp = filt_p.clone();
    for k in (0..nodes - 1).rev() {
        let pp = &pred_p[k + 1];
        let chol = pp.clone().cholesky().ok_or(Error::NotPositiveDefinite("predicted covariance".into()))?;
        // G = P_k Fᵀ P⁻¹_{k+1}
        let g = chol.solve(&(&tr.f * &filt_p[k])).transpose();
        let m = &filt_m[k] + &g * (&sm[k + 1] - &pred_m[k + 1]);
        let p = &filt_p[k] + &g * (&sp[k + 1] - pp) * g.transpose();
        sm[k] = m;
        sp[k] = 0.5 * (&p + p.transpose());
    }
    Ok(GaussianSmoothing {
        mean: sm.iter().map(|v| v.iter().copied().collect()).collect(),
        cov: sp.iter().map(vec_of).collect(),
        filter_mean: filt_m.iter().map(|v| v.iter().copied().collect()).collect(),
        filter_cov: filt_p.iter().map(vec_of).collect(),
        log_evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialLaw, LinearDrift, RateMatrix};
    use crate::oracle::ou_exact_moments;

    fn ou() -> HybridModel {
        HybridModel::new(
            RateMatrix::zeros(1),
            vec![LinearDrift::from_alpha_beta(&[1.5], &[1.0])],
            vec![vec![0.25]],
            InitialLaw {
                p0: vec![1.0],
                mean: vec![vec![0.0]],
                cov: vec![vec![0.01]],
            },
            vec![1e-12],
        )
        .unwrap()
    }

    #[test]
    fn no_observations_gives_prior_moments() {
        let grid = TimeGrid::new(2.0, 0.01).unwrap();
        let s = gaussian_smoother_1mode(&ou(), &ObservationSet::empty(), &grid).unwrap();
        for k in [0, 50, 100, 200] {
            let (m, v) = ou_exact_moments(1.5, 1.0, 0.25, 0.0, 0.01, grid.time(k));
            assert!((s.mean[k][0] - m).abs() < 1e-12);
            assert!((s.cov[k][0] - v).abs() < 1e-12);
        }
        assert_eq!(s.log_evidence, 0.0);
    }

    #[test]
    fn exact_datum_is_interpolated() {
        let grid = TimeGrid::new(2.0, 0.01).unwrap();
        let obs = ObservationSet::new(vec![1.0], vec![vec![0.3]]).unwrap();
        let s = gaussian_smoother_1mode(&ou(), &obs, &grid).unwrap();
        assert!((s.mean[100][0] - 0.3).abs() < 1e-4);
    }

    #[test]
    fn single_observation_evidence_is_marginal_density() {
        let mut model = ou();
        model.obs_cov = vec![0.1];
        let grid = TimeGrid::new(2.0, 0.01).unwrap();
        let obs = ObservationSet::new(vec![0.7], vec![vec![0.9]]).unwrap();
        let s = gaussian_smoother_1mode(&model, &obs, &grid).unwrap();
        let (m, v) = ou_exact_moments(1.5, 1.0, 0.25, 0.0, 0.01, 0.7);
        let var = v + 0.1;
        let want = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (0.9 - m).powi(2) / var);
        assert!((s.log_evidence - want).abs() < 1e-12);
    }
}

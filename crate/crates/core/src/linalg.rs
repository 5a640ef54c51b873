//! Small dense kernels on flat row-major `n x n` buffers.
//!
//! The engine keeps marginals and controls in flat `Vec<f64>` arrays indexed
//! by (node, mode); the state dimension is small (1-3), so these loops beat
//! any general-purpose matrix type that would allocate per call.

use nalgebra::DMatrix;

#[inline]
pub fn zero(out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
}

/// `out = a * b`
pub fn mul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

/// `out = a^T * b`
pub fn mul_tn(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[k * n + i] * b[k * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

/// `out = a * b^T`
pub fn mul_nt(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
}

/// `out = a * x`
pub fn mat_vec(a: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += a[i * n + k] * x[k];
        }
        out[i] = s;
    }
}

/// `out = a^T * x`
pub fn mat_t_vec(a: &[f64], x: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += a[k * n + i] * x[k];
        }
        out[i] = s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean distance.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// `tr(a * b)`
pub fn trace_mul(a: &[f64], b: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            s += a[i * n + k] * b[k * n + i];
        }
    }
    s
}

pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

/// Lower Cholesky factor, `None` if `a` is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(a: &[f64], n: usize) -> Option<(Vec<f64>, f64)> {
    let l = cholesky(a, n)?;
    let logdet = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
    // invert L by forward substitution, then A^-1 = L^-T L^-1
    let mut linv = vec![0.0; n * n];
    for j in 0..n {
        linv[j * n + j] = 1.0 / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    mul_tn(&linv, &linv, n, &mut inv);
    symmetrize(&mut inv, n);
    Some((inv, logdet))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(a: &[f64], n: usize) -> f64 {
    match n {
        0 => f64::INFINITY,
        1 => a[0],
        2 => {
            let (p, q, r) = (a[0], 0.5 * (a[1] + a[2]), a[3]);
            let mean = 0.5 * (p + r);
            let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
            mean - rad
        }
        _ => {
            let m = DMatrix::from_row_slice(n, n, a);
            let m = 0.5 * (&m + m.transpose());
            m.symmetric_eigenvalues().min()
        }
    }
}

/// Clamp the spectrum of a symmetric matrix from below.
pub fn floor_spectrum(a: &[f64], n: usize, floor: f64) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, n, a);
    let m = 0.5 * (&m + m.transpose());
    let eig = m.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    to_flat(&(0.5 * (&out + out.transpose())))
}

pub fn to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_flat(a: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_spd() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let (inv, logdet) = spd_inverse_logdet(&a, 3).unwrap();
        let mut prod = [0.0; 9];
        mul(&a, &inv, 3, &mut prod);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 3 + j] - want).abs() < 1e-12);
            }
        }
        let det = from_flat(&a, 3).determinant();
        assert!((logdet - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!(cholesky(&[0.0], 1).is_none());
    }

    #[test]
    fn min_eig_matches_general_path() {
        let a = [2.0, 0.7, 0.7, 0.5];
        let m = DMatrix::from_row_slice(2, 2, &a);
        let want = m.symmetric_eigenvalues().min();
        assert!((min_eig_sym(&a, 2) - want).abs() < 1e-12);
    }

    #[test]
    fn spectrum_floor_lifts_zero_eigenvalue() {
        let out = floor_spectrum(&[1.0, 1.0, 1.0, 1.0], 2, 1e-3);
        assert!(min_eig_sym(&out, 2) >= 1e-3 - 1e-12);
    }
}

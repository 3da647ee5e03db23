use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const NEG_EIGEN_TOL: f64 = 1e-8;

/// Principal square root of a symmetric positive semi-definite matrix via
/// symmetric eigendecomposition. Eigenvalues in `[-tol, 0)` are clamped to 0,
/// where `tol` is 1e-8 relative to the largest eigenvalue magnitude (floor 1).
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() || n == 0 {
        return Err(Error::LinAlg(format!("sqrtm_psd needs a square matrix, got {}x{}", n, a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("sqrtm_psd", "non-finite matrix entry"));
    }
    let scale = a.amax().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = (a[(i, j)] - a[(j, i)]).abs();
            if d > SYMMETRY_TOL * scale {
                return Err(Error::LinAlg(format!(
                    "sqrtm_psd input asymmetric at ({i}, {j}): |Δ| = {d:e}"
                )));
            }
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if *l < -NEG_EIGEN_TOL * top {
            return Err(Error::LinAlg(format!("sqrtm_psd input indefinite: eigenvalue {l:e}")));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    let b = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((&b + b.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_spd(n: usize, rng: &mut RngStream) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.normal());
        let q = m.qr().q();
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| rng.uniform_range(0.1, 5.0)));
        let a = &q * lambda * q.transpose();
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_and_diagonal() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((sqrtm_psd(&i).unwrap() - &i).amax() < 1e-12);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn reconstructs_random_spd() {
        let mut rng = RngStream::new(5, "sqrtm");
        for _ in 0..20 {
            let a = random_spd(8, &mut rng);
            let b = sqrtm_psd(&a).unwrap();
            let err = (&b * &b - &a).norm();
            assert!(err <= 1e-6 * (1.0 + a.norm()), "err {err}");
            assert!((&b - b.transpose()).amax() <= 1e-9);
        }
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrtm_psd(&a), Err(Error::LinAlg(_))));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(sqrtm_psd(&b), Err(Error::LinAlg(_))));
        // tiny negative eigenvalue is clamped
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = sqrtm_psd(&c).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }
}

//! Continuous algebraic Riccati equation for small dense systems.
//!
//! `AᵀP + PA − PBR⁻¹BᵀP + Q = 0` is solved by the matrix sign function of the
//! Hamiltonian, then polished with Newton–Kleinman steps (each a Lyapunov
//! solve through the Kronecker form, fine for n ≲ 10).

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("R is not positive definite")]
    IndefiniteR,
    #[error("Hamiltonian has eigenvalues on the imaginary axis (pair not stabilizable/detectable)")]
    ImaginaryAxis,
    #[error("sign iteration did not converge")]
    NoConvergence,
    #[error("closed loop is not stable")]
    NotStabilizing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    /// `K = R⁻¹BᵀP`, so `u = −Kx`.
    pub k: DMatrix<f64>,
    pub residual: f64,
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let rinv = r.clone().try_inverse().expect("R invertible");
    let res = a.transpose() * p + p * a - p * b * rinv * b.transpose() * p + q;
    res.norm()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves `FᵀX + XF = −C`.
fn lyapunov(f: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = f.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let ft = f.transpose();
    let op = eye.kronecker(&ft) + ft.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-c).as_slice());
    let x = op.lu().solve(&rhs)?;
    Some(symmetrize(&DMatrix::from_column_slice(n, n, x.as_slice())))
}

fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.complex_eigenvalues().iter().all(|z| z.re < 0.0)
}

pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<CareSolution, RiccatiError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(RiccatiError::Dimension("expected A n×n, B n×m, Q n×n, R m×m"));
    }
    let rinv = r.clone().cholesky().ok_or(RiccatiError::IndefiniteR)?.inverse();
    let g = b * &rinv * b.transpose();

    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(RiccatiError::ImaginaryAxis);
        }
        let zinv = lu.try_inverse().ok_or(RiccatiError::ImaginaryAxis)?;
        let c = det.abs().powf(1.0 / (2 * n) as f64);
        let next = (&z / c + zinv * c) * 0.5;
        let change = (&next - &z).norm();
        let scale = next.norm();
        z = next;
        if change <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RiccatiError::NoConvergence);
    }

    // stable subspace is range [I; P]: [W12; W22 + I] P = −[W11 + I; W21]
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let mut p = symmetrize(
        &lhs.svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|_| RiccatiError::ImaginaryAxis)?,
    );

    for _ in 0..4 {
        let res = care_residual(a, b, q, r, &p);
        if res <= 1e-12 * p.norm().max(1.0) {
            break;
        }
        let closed = a - &g * &p;
        match lyapunov(&closed, &(q + &p * &g * &p)) {
            Some(next) => p = next,
            None => break,
        }
    }

    let k = &rinv * b.transpose() * &p;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(RiccatiError::NotStabilizing);
    }
    let residual = care_residual(a, b, q, r, &p);
    Ok(CareSolution { p, k, residual })
}

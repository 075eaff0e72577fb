//! Continuous-time algebraic Riccati equation `F^T P + P F - P G G^T P + Q = 0`.
//!
//! The stabilizing solution is taken from the stable invariant subspace of the
//! Hamiltonian via the matrix sign function, then polished with Newton-Kleinman steps.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const SIGN_MAX_ITER: usize = 100;
const SIGN_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 20;

/// Frobenius norm of the Riccati residual.
pub fn care_residual(f: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (f.transpose() * p + p * f - p * g * g.transpose() * p + q).norm()
}

fn check_shapes(f: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
    let n = f.nrows();
    if f.ncols() != n || g.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(format!(
            "CARE needs square F, Q and G with matching rows; got F {}x{}, G {}x{}, Q {}x{}",
            f.nrows(),
            f.ncols(),
            g.nrows(),
            g.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(Error::InvalidParams("Q must be symmetric".into()));
    }
    if q.clone().symmetric_eigenvalues().min() <= 0.0 {
        return Err(Error::InvalidParams("Q must be positive definite".into()));
    }
    Ok(())
}

fn matrix_sign(mut z: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = z.nrows() as f64;
    for _ in 0..SIGN_MAX_ITER {
        let lu = z.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::NoStabilizingSolution("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
        let det = z.clone().lu().determinant().abs();
        let c = if det.is_finite() && det > 0.0 { det.powf(1.0 / n) } else { 1.0 };
        let next = (&z / c + inv * c) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if change < SIGN_TOL {
            return Ok(z);
        }
    }
    Err(Error::NoStabilizingSolution("matrix sign iteration did not converge".into()))
}

/// Solves `A^T X + X A = -W` through the Kronecker form.
fn lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-w).as_slice());
    let x = op.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Lyapunov test: `A` is Hurwitz iff `A^T X + X A = -I` has a positive definite solution.
fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    match lyapunov(a, &DMatrix::identity(n, n)) {
        Some(x) if x.iter().all(|v| v.is_finite()) => ((&x + x.transpose()) * 0.5).symmetric_eigenvalues().min() > 0.0,
        _ => false,
    }
}

fn is_stabilizing(f: &DMatrix<f64>, g: &DMatrix<f64>, p: &DMatrix<f64>) -> bool {
    is_hurwitz(&(f - g * g.transpose() * p))
}

/// Stabilizing solution `P = P^T > 0` of the CARE.
pub fn solve_care(f: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shapes(f, g, q)?;
    let n = f.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(f);
    h.view_mut((0, n), (n, n)).copy_from(&(-(g * g.transpose())));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-f.transpose()));

    let w = matrix_sign(h)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let mut p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::NoStabilizingSolution(e.to_string()))?;
    p = (&p + p.transpose()) * 0.5;

    // Newton-Kleinman polishing from the stabilizing estimate.
    let mut best = care_residual(f, g, q, &p);
    for _ in 0..NEWTON_MAX_ITER {
        if best < 1e-13 * p.norm().max(1.0) {
            break;
        }
        let k = g.transpose() * &p;
        let a = f - g * &k;
        let Some(next) = lyapunov(&a, &(q + k.transpose() * &k)) else { break };
        let next = (&next + next.transpose()) * 0.5;
        let r = care_residual(f, g, q, &next);
        if !(r < best) {
            break;
        }
        p = next;
        best = r;
    }

    if !is_stabilizing(f, g, &p) {
        return Err(Error::NoStabilizingSolution("closed loop F - G G^T P is not Hurwitz".into()));
    }
    if p.clone().symmetric_eigenvalues().min() <= 0.0 {
        return Err(Error::NoStabilizingSolution("solution is not positive definite".into()));
    }
    Ok(p)
}

//! Discrete-time algebraic Riccati equation and LQR gains.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DARE_MAX_ITER: usize = 100_000;
pub const DARE_REL_TOL: f64 = 1e-12;

/// Fixed point of `P ← Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, iterated from `P = Q`.
pub fn dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let m = b.ncols();
    if a.ncols() != d || b.nrows() != d || q.shape() != (d, d) || r.shape() != (m, m) {
        return Err(Error::invalid("Riccati data has inconsistent dimensions"));
    }
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_step(a, b, q, r, &p)?;
        let change = (&next - &p).norm();
        let scale = next.norm();
        if !scale.is_finite() {
            return Err(Error::numerical("Riccati iteration diverged"));
        }
        p = (&next + next.transpose()) * 0.5;
        if change <= DARE_REL_TOL * scale.max(f64::MIN_POSITIVE) {
            return Ok(p);
        }
    }
    Err(Error::numerical(format!(
        "Riccati iteration did not converge in {DARE_MAX_ITER} steps"
    )))
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let bt_pa = b.transpose() * &pa;
    let s = r + b.transpose() * p * b;
    let s_inv_bt_pa = s
        .lu()
        .solve(&bt_pa)
        .ok_or_else(|| Error::numerical("R + BᵀPB is singular"))?;
    Ok(q + a.transpose() * &pa - bt_pa.transpose() * s_inv_bt_pa)
}

/// Infinite-horizon LQR gain `K = −(R + BᵀPB)⁻¹BᵀPA`, so the closed loop is
/// `A + BK`. Returns `(K, P)`.
pub fn lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = dare(a, b, q, r)?;
    let s = r + b.transpose() * &p * b;
    let k = s
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or_else(|| Error::numerical("R + BᵀPB is singular"))?;
    Ok((-k, p))
}

//! Dense symmetric-matrix utilities.
//!
//! Everything here works on small dense matrices (dimension well below 50).
//! Symmetric eigenproblems go through a cyclic Jacobi sweep; general
//! spectra (monodromy operators) go through a real Schur decomposition.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Maximum number of Jacobi sweeps before giving up.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Condition-number ceiling accepted by [`solve_dense`].
pub const MAX_CONDITION: f64 = 1e12;

/// A real symmetric matrix.
///
/// Construction always symmetrizes the input as `(X + Xᵀ)/2`, so the stored
/// matrix is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat(DMatrix<f64>);

impl SymMat {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::invalid(
                "symmetric matrix must have positive dimension",
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("symmetric matrix has non-finite entries"));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes without validation. Callers guarantee a square finite input.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        let s = (m + t) * 0.5;
        debug_assert!(asymmetry(&s) <= 1e-12 * (1.0 + s.amax()));
        SymMat(s)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn identity(dim: usize) -> Self {
        SymMat(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMat(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMat(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.0)
    }

    /// `aᵀ · self · a`.
    pub fn congruence(&self, a: &DMatrix<f64>) -> SymMat {
        Self::symmetrize(a.transpose() * &self.0 * a)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn eig(&self) -> Result<SymEigen> {
        eig_sym(self)
    }

    pub fn min_eig(&self) -> Result<f64> {
        min_eig(self)
    }

    pub fn inverse(&self) -> Result<SymMat> {
        let inv = self
            .0
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("symmetric matrix is singular"))?;
        Ok(Self::symmetrize(inv))
    }

    pub fn svec(&self) -> SVec {
        svec(self)
    }
}

impl Add for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        SymMat(&self.0 + &rhs.0)
    }
}

impl Sub for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        SymMat(&self.0 - &rhs.0)
    }
}

impl Mul<f64> for &SymMat {
    type Output = SymMat;
    fn mul(self, rhs: f64) -> SymMat {
        SymMat(&self.0 * rhs)
    }
}

impl Neg for &SymMat {
    type Output = SymMat;
    fn neg(self) -> SymMat {
        SymMat(-&self.0)
    }
}

/// Half-vectorization of a symmetric matrix, column-major lower triangle,
/// off-diagonal entries scaled by √2 so that `⟨svec X, svec Y⟩ = tr(XY)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SVec {
    dim: usize,
    coords: Vec<f64>,
}

impl SVec {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != svec_len(dim) {
            return Err(Error::invalid(format!(
                "svec of a {dim}x{dim} matrix needs {} coordinates, got {}",
                svec_len(dim),
                coords.len()
            )));
        }
        Ok(SVec { dim, coords })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dot(&self, other: &SVec) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a * b)
            .sum()
    }
}

pub fn svec_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

pub fn svec(x: &SymMat) -> SVec {
    let d = x.dim();
    let mut coords = Vec::with_capacity(svec_len(d));
    for c in 0..d {
        for r in c..d {
            let v = x.0[(r, c)];
            coords.push(if r == c { v } else { v * SQRT_2 });
        }
    }
    SVec { dim: d, coords }
}

pub fn smat(v: &SVec) -> SymMat {
    smat_slice(v.dim, &v.coords)
}

/// Inverse of [`svec`] on a raw coordinate slice of length `d(d+1)/2`.
pub(crate) fn smat_slice(d: usize, coords: &[f64]) -> SymMat {
    debug_assert_eq!(coords.len(), svec_len(d));
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for c in 0..d {
        for r in c..d {
            if r == c {
                m[(r, c)] = coords[k];
            } else {
                let v = coords[k] / SQRT_2;
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
            k += 1;
        }
    }
    SymMat(m)
}

/// Writes `svec(x)` into `out` (length `d(d+1)/2`).
pub(crate) fn svec_into(x: &DMatrix<f64>, out: &mut [f64]) {
    let d = x.nrows();
    let mut k = 0;
    for c in 0..d {
        for r in c..d {
            out[k] = if r == c {
                x[(r, c)]
            } else {
                0.5 * (x[(r, c)] + x[(c, r)]) * SQRT_2
            };
            k += 1;
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, column `k` pairs with `values[k]`.
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigensolver.
///
/// Sweeps until the off-diagonal Frobenius mass drops below
/// `1e-12·‖X‖_F`, or fails after [`JACOBI_MAX_SWEEPS`] sweeps.
pub fn eig_sym(x: &SymMat) -> Result<SymEigen> {
    let n = x.dim();
    let mut a = x.0.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();
    if scale == 0.0 {
        return Ok(SymEigen {
            values: vec![0.0; n],
            vectors: v,
        });
    }
    let tol = 1e-12 * scale;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return Err(Error::numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for c in 0..n {
        for r in 0..n {
            if r != c {
                s += a[(r, c)] * a[(r, c)];
            }
        }
    }
    s.sqrt()
}

// A ← JᵀAJ, V ← VJ for the plane rotation J(p, q).
fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

pub fn min_eig(x: &SymMat) -> Result<f64> {
    let n = x.dim();
    if n == 1 {
        return Ok(x.0[(0, 0)]);
    }
    Ok(eig_sym(x)?.values[0])
}

/// Nearest positive-semidefinite matrix in Frobenius norm (eigenvalues clipped at 0).
pub fn psd_project(x: &SymMat) -> Result<SymMat> {
    let n = x.dim();
    if n == 1 {
        return Ok(SymMat(DMatrix::from_element(1, 1, x.0[(0, 0)].max(0.0))));
    }
    let SymEigen { values, vectors } = eig_sym(x)?;
    if values[0] >= 0.0 {
        return Ok(x.clone());
    }
    let mut out = DMatrix::zeros(n, n);
    for (k, &lambda) in values.iter().enumerate() {
        if lambda <= 0.0 {
            continue;
        }
        let col = vectors.column(k);
        out += col * col.transpose() * lambda;
    }
    Ok(SymMat::symmetrize(out))
}

/// Largest eigenvalue modulus of a general real square matrix.
pub fn spectral_radius(l: &DMatrix<f64>) -> Result<f64> {
    if l.nrows() != l.ncols() {
        return Err(Error::invalid("spectral radius needs a square matrix"));
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "spectral radius input has non-finite entries",
        ));
    }
    match l.nrows() {
        0 => return Ok(0.0),
        1 => return Ok(l[(0, 0)].abs()),
        _ => {}
    }
    let schur = Schur::try_new(l.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("Schur decomposition did not converge"))?;
    let radius = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    Ok(radius)
}

/// Solves `a·x = b` by LU, refusing ill-conditioned systems.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::invalid(format!(
            "solve_dense: matrix {}x{} with right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or_else(|| Error::Numerical {
        message: "matrix is singular".into(),
        condition: Some(f64::INFINITY),
    })?;
    let condition = norm1(a) * norm1(&inv);
    if !condition.is_finite() || condition >= MAX_CONDITION {
        return Err(Error::Numerical {
            message: format!("matrix is ill-conditioned (cond₁ ≈ {condition:.3e})"),
            condition: Some(condition),
        });
    }
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::numerical("LU solve failed"))?;
    let residual = (a * &x - b).norm();
    let bound = 1e-9 * (a.norm() * x.norm() + b.norm());
    if residual > bound {
        return Err(Error::Numerical {
            message: format!("linear solve residual {residual:.3e} exceeds {bound:.3e}"),
            condition: Some(condition),
        });
    }
    Ok(x)
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Max |X(r,c) − X(c,r)|.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            worst = worst.max((m[(r, c)] - m[(c, r)]).abs());
        }
    }
    worst
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::invalid("matrix has no rows"));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::invalid("matrix has empty rows"));
    }
    if let Some((r, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != ncols) {
        return Err(Error::invalid(format!(
            "ragged matrix: row {r} has {} entries, expected {ncols}",
            row.len()
        )));
    }
    let m = DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    Ok(m)
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(rows: &[&[f64]]) -> SymMat {
        SymMat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_sym(rng: &mut ChaCha8Rng, d: usize) -> SymMat {
        SymMat::new(DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> SymMat {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        SymMat::new(&g * g.transpose()).unwrap()
    }

    #[test]
    fn svec_definition() {
        let v = svec(&sym(&[&[1.0, 2.0], &[2.0, 3.0]]));
        assert_eq!(v.coords(), &[1.0, 2.0 * SQRT_2, 3.0]);
    }

    #[test]
    fn smat_inverts_svec_on_identity() {
        let i2 = SymMat::identity(2);
        assert_eq!(smat(&svec(&i2)), i2);
        let v = svec(&i2);
        assert!((v.dot(&v) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn svec_rejects_wrong_length() {
        assert!(matches!(
            SVec::new(2, vec![1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn known_spectra() {
        assert_eq!(
            eig_sym(&SymMat::identity(2)).unwrap().values,
            vec![1.0, 1.0]
        );
        let e = eig_sym(&sym(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let e = eig_sym(&SymMat::from_diagonal(&[7.0, 3.0, 5.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn min_eig_examples() {
        assert_eq!(min_eig(&SymMat::identity(2)).unwrap(), 1.0);
        assert!((min_eig(&SymMat::from_diagonal(&[1.0, -1.0])).unwrap() + 1.0).abs() < 1e-15);
        assert!((min_eig(&sym(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn psd_projection_examples() {
        let p = psd_project(&SymMat::from_diagonal(&[1.0, -1.0])).unwrap();
        assert!((p.matrix() - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-15);
        assert_eq!(
            psd_project(&SymMat::identity(2)).unwrap(),
            SymMat::identity(2)
        );
        let p = psd_project(&sym(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((p.matrix() - DMatrix::from_element(2, 2, 0.5)).amax() < 1e-14);
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&DMatrix::identity(2, 2)).unwrap(), 1.0);
        let a = DMatrix::from_row_slice(2, 2, &[0.18, 0.18, 1.0368, 1.0368]);
        assert!((spectral_radius(&a).unwrap() - 1.2168).abs() < 1e-12);
        let b = DMatrix::from_row_slice(2, 2, &[0.324, 0.036, 1.86624, 0.20736]);
        assert!((spectral_radius(&b).unwrap() - 0.53136).abs() < 1e-12);
    }

    #[test]
    fn spectral_radius_of_rotation_is_complex_modulus() {
        let r = DMatrix::from_row_slice(2, 2, &[0.0, -0.9, 0.9, 0.0]);
        assert!((spectral_radius(&r).unwrap() - 0.9).abs() < 1e-14);
    }

    #[test]
    fn solve_dense_examples() {
        let x = solve_dense(&DMatrix::identity(2, 2), &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(x.as_slice(), &[3.0, 4.0]);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let x = solve_dense(&d, &DVector::from_vec(vec![2.0, 4.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let x = solve_dense(&u, &DVector::from_vec(vec![2.0, 1.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_dense_reports_condition() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]);
        match solve_dense(&s, &DVector::from_vec(vec![1.0, 1.0])) {
            Err(Error::Numerical {
                condition: Some(c), ..
            }) => assert!(c >= MAX_CONDITION),
            other => panic!("expected ill-conditioning error, got {other:?}"),
        }
        let z = DMatrix::zeros(2, 2);
        assert!(matches!(
            solve_dense(&z, &DVector::from_vec(vec![1.0, 1.0])),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn constructor_symmetrizes() {
        let m = SymMat::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0])).unwrap();
        assert_eq!(m.matrix()[(0, 1)], 3.0);
        assert_eq!(m.matrix()[(1, 0)], 3.0);
        assert!(SymMat::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn projection_minimizes_distance_over_sampled_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let d = rng.random_range(1..=4);
            let x = random_sym(&mut rng, d);
            let p = psd_project(&x).unwrap();
            let best = (&x - &p).frobenius_norm();
            for _ in 0..100 {
                let s = random_psd(&mut rng, d);
                assert!(best <= (&x - &s).frobenius_norm() + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn psd_project_idempotent(entries in prop::collection::vec(-5.0f64..5.0, 16), d in 1usize..=4) {
            let x = SymMat::new(DMatrix::from_fn(d, d, |r, c| entries[r * 4 + c])).unwrap();
            let p = psd_project(&x).unwrap();
            prop_assert!(min_eig(&p).unwrap() >= -1e-10);
            let pp = psd_project(&p).unwrap();
            prop_assert!((pp.matrix() - p.matrix()).amax() <= 1e-10 * (1.0 + p.matrix().amax()));
        }

        #[test]
        fn svec_is_an_isometry(a in prop::collection::vec(-5.0f64..5.0, 25), b in prop::collection::vec(-5.0f64..5.0, 25), d in 1usize..=5) {
            let x = SymMat::new(DMatrix::from_fn(d, d, |r, c| a[r * 5 + c])).unwrap();
            let y = SymMat::new(DMatrix::from_fn(d, d, |r, c| b[r * 5 + c])).unwrap();
            let (sx, sy) = (svec(&x), svec(&y));
            let tr = (x.matrix() * y.matrix()).trace();
            prop_assert!((sx.dot(&sy) - tr).abs() <= 1e-12 * (1.0 + tr.abs()));
            let fro = x.frobenius_norm();
            prop_assert!((sx.dot(&sx).sqrt() - fro).abs() <= 1e-12 * (1.0 + fro));
            prop_assert!((smat(&sx).matrix() - x.matrix()).amax() <= 1e-14 * (1.0 + x.matrix().amax()));
        }

        #[test]
        fn eigenpairs_are_accurate(entries in prop::collection::vec(-10.0f64..10.0, 36), d in 1usize..=6) {
            let x = SymMat::new(DMatrix::from_fn(d, d, |r, c| entries[r * 6 + c])).unwrap();
            let e = eig_sym(&x).unwrap();
            let scale = x.frobenius_norm().max(1e-300);
            for k in 0..d {
                let v = e.vectors.column(k);
                let r = x.matrix() * v - v * e.values[k];
                prop_assert!(r.norm() <= 1e-9 * scale);
            }
            let gram = e.vectors.transpose() * &e.vectors;
            prop_assert!((gram - DMatrix::identity(d, d)).amax() <= 1e-10);
            prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn spectral_radius_is_homogeneous(entries in prop::collection::vec(-2.0f64..2.0, 36), d in 1usize..=6, c in -3.0f64..3.0) {
            let l = DMatrix::from_fn(d, d, |r, k| entries[r * 6 + k]);
            let base = spectral_radius(&l).unwrap();
            let scaled = spectral_radius(&(&l * c)).unwrap();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + c.abs() * base));
        }
    }
}

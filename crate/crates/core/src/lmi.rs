//! Feasibility of strict linear matrix inequalities by alternating projections.
//!
//! Unknowns are symmetric or rectangular matrix blocks stacked into one
//! coordinate vector `x` (symmetric blocks in svec coordinates). Each
//! constraint `F_r(x) ⪯ −εI` gets a slack `S_r ⪰ 0` with `F_r(x) + S_r = −εI`,
//! and the solver alternates between the affine set `{G x + s = h}` and the
//! product cone `{s : every S_r ⪰ 0}`, with Dykstra corrections on the cone
//! step. Every few rounds the affine-projected `x` is plugged back into the
//! original constraint maps, and only a point whose recomputed eigenvalue
//! margins are all positive is reported feasible.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, min_eig, psd_project, smat_slice, svec_into, svec_len, SymMat};

/// Default round cap for [`solve_feasibility`].
pub const DEFAULT_MAX_ITER: usize = 20_000;

/// An affine matrix-valued map of the block values.
pub type AffineMap = Arc<dyn Fn(&[DMatrix<f64>]) -> DMatrix<f64> + Send + Sync>;

/// Handle to an unknown block of an [`AffinePsdProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(usize);

impl BlockId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Symmetric { dim: usize },
    Rectangular { rows: usize, cols: usize },
}

impl BlockKind {
    fn coords(self) -> usize {
        match self {
            BlockKind::Symmetric { dim } => svec_len(dim),
            BlockKind::Rectangular { rows, cols } => rows * cols,
        }
    }

    fn shape(self) -> (usize, usize) {
        match self {
            BlockKind::Symmetric { dim } => (dim, dim),
            BlockKind::Rectangular { rows, cols } => (rows, cols),
        }
    }
}

/// Direction of a strict matrix inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    /// `F(x) ⪯ −εI`.
    NegativeDefinite,
    /// `F(x) ⪰ εI`.
    PositiveDefinite,
}

struct Constraint {
    name: String,
    sense: Sense,
    map: AffineMap,
    size: usize,
}

/// Unknown blocks plus strict LMI constraints on them.
pub struct AffinePsdProblem {
    blocks: Vec<(String, BlockKind)>,
    constraints: Vec<Constraint>,
    epsilon: f64,
}

impl AffinePsdProblem {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "strictness offset must be positive, got {epsilon}"
            )));
        }
        Ok(AffinePsdProblem {
            blocks: Vec::new(),
            constraints: Vec::new(),
            epsilon,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn add_symmetric(&mut self, name: impl Into<String>, dim: usize) -> BlockId {
        self.blocks
            .push((name.into(), BlockKind::Symmetric { dim }));
        BlockId(self.blocks.len() - 1)
    }

    pub fn add_rectangular(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> BlockId {
        self.blocks
            .push((name.into(), BlockKind::Rectangular { rows, cols }));
        BlockId(self.blocks.len() - 1)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, BlockKind)> {
        self.blocks.iter().map(|(n, k)| (n.as_str(), *k))
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraint_names(&self) -> impl Iterator<Item = &str> {
        self.constraints.iter().map(|c| c.name.as_str())
    }

    pub fn n_vars(&self) -> usize {
        self.blocks.iter().map(|(_, k)| k.coords()).sum()
    }

    /// Adds `map(x) ⪯ −εI` or `map(x) ⪰ εI`.
    ///
    /// The map must return a square symmetric matrix and be affine; both are
    /// probed at two random points before the constraint is accepted.
    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        sense: Sense,
        map: AffineMap,
    ) -> Result<()> {
        let name = name.into();
        let zero = self.zero_values();
        let f0 = map(&zero);
        if f0.nrows() != f0.ncols() || f0.nrows() == 0 {
            return Err(Error::invalid(format!(
                "constraint {name}: map returns a {}x{} matrix",
                f0.nrows(),
                f0.ncols()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ self.constraints.len() as u64);
        let x = self.random_values(&mut rng);
        let y = self.random_values(&mut rng);
        let alpha = 0.3710;
        let mix: Vec<DMatrix<f64>> = x
            .iter()
            .zip(&y)
            .map(|(a, b)| a * alpha + b * (1.0 - alpha))
            .collect();
        let (fx, fy, fm) = (map(&x), map(&y), map(&mix));
        if fx.shape() != f0.shape() || fy.shape() != f0.shape() || fm.shape() != f0.shape() {
            return Err(Error::invalid(format!(
                "constraint {name}: output shape depends on the input"
            )));
        }
        let scale = 1.0 + fx.amax() + fy.amax() + f0.amax();
        if (&fm - (&fx * alpha + &fy * (1.0 - alpha))).amax() > 1e-9 * scale {
            return Err(Error::invalid(format!(
                "constraint {name}: map is not affine"
            )));
        }
        if asymmetry(&fx) > 1e-9 * scale || asymmetry(&f0) > 1e-9 * scale {
            return Err(Error::invalid(format!(
                "constraint {name}: map is not symmetric"
            )));
        }
        if fx.iter().chain(f0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "constraint {name}: map has non-finite values"
            )));
        }
        self.constraints.push(Constraint {
            name,
            sense,
            map,
            size: f0.nrows(),
        });
        Ok(())
    }

    /// Adds `X ⪰ εI` for a symmetric block.
    pub fn require_positive_definite(&mut self, block: BlockId) -> Result<()> {
        let (name, kind) = self
            .blocks
            .get(block.0)
            .cloned()
            .ok_or_else(|| Error::invalid("unknown block"))?;
        if !matches!(kind, BlockKind::Symmetric { .. }) {
            return Err(Error::invalid(format!("block {name} is not symmetric")));
        }
        let idx = block.0;
        self.add_constraint(
            format!("{name} ≻ 0"),
            Sense::PositiveDefinite,
            Arc::new(move |v: &[DMatrix<f64>]| v[idx].clone()),
        )
    }

    fn zero_values(&self) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|(_, k)| {
                let (r, c) = k.shape();
                DMatrix::zeros(r, c)
            })
            .collect()
    }

    fn random_values(&self, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|(_, k)| {
                let (r, c) = k.shape();
                let m = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
                match k {
                    BlockKind::Symmetric { .. } => (&m + m.transpose()) * 0.5,
                    BlockKind::Rectangular { .. } => m,
                }
            })
            .collect()
    }

    fn unpack(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|(_, k)| {
                let n = k.coords();
                let slice = &x[off..off + n];
                off += n;
                match *k {
                    BlockKind::Symmetric { dim } => smat_slice(dim, slice).into_inner(),
                    BlockKind::Rectangular { rows, cols } => {
                        DMatrix::from_column_slice(rows, cols, slice)
                    }
                }
            })
            .collect()
    }

    fn pack(&self, values: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        if values.len() != self.blocks.len() {
            return Err(Error::invalid(format!(
                "start point has {} blocks, problem has {}",
                values.len(),
                self.blocks.len()
            )));
        }
        let mut x = vec![0.0; self.n_vars()];
        let mut off = 0;
        for ((name, kind), v) in self.blocks.iter().zip(values) {
            if v.shape() != kind.shape() {
                return Err(Error::invalid(format!(
                    "start value for {name} has the wrong shape"
                )));
            }
            let n = kind.coords();
            match kind {
                BlockKind::Symmetric { .. } => svec_into(v, &mut x[off..off + n]),
                BlockKind::Rectangular { .. } => x[off..off + n].copy_from_slice(v.as_slice()),
            }
            off += n;
        }
        Ok(x)
    }

    /// Eigenvalue margin of each constraint at `values`: `λ_min(−F)` for
    /// negative-definite constraints, `λ_min(F)` otherwise.
    pub fn margins(&self, values: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        self.constraints
            .iter()
            .map(|c| {
                let f = (c.map)(values);
                let oriented = match c.sense {
                    Sense::NegativeDefinite => -f,
                    Sense::PositiveDefinite => f,
                };
                min_eig(&SymMat::new(oriented)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityStatus {
    Feasible,
    InfeasibleTimeout,
}

#[derive(Debug, Clone)]
pub struct FeasibilityResult {
    pub status: FeasibilityStatus,
    /// One value per block, in creation order.
    pub values: Vec<DMatrix<f64>>,
    /// Recomputed margin per constraint, in creation order.
    pub margins: Vec<f64>,
    pub iterations: usize,
}

impl FeasibilityResult {
    pub fn is_feasible(&self) -> bool {
        self.status == FeasibilityStatus::Feasible
    }

    pub fn value(&self, block: BlockId) -> &DMatrix<f64> {
        &self.values[block.0]
    }

    pub fn sym(&self, block: BlockId) -> SymMat {
        SymMat::symmetrize(self.values[block.0].clone())
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// A point counts as feasible when every margin exceeds this.
    pub tol: f64,
    /// Rounds between verifications.
    pub check_every: usize,
    /// Starting block values; zero when absent.
    pub start: Option<Vec<DMatrix<f64>>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iter: DEFAULT_MAX_ITER,
            tol: 0.0,
            check_every: 10,
            start: None,
        }
    }
}

/// `1e-6·(1 + max ‖M‖₂)` over the given data matrices.
pub fn default_epsilon(mats: &[&DMatrix<f64>]) -> f64 {
    let biggest = mats
        .iter()
        .map(|m| {
            if m.is_empty() {
                0.0
            } else {
                (*m).clone().svd(false, false).singular_values.max()
            }
        })
        .fold(0.0, f64::max);
    1e-6 * (1.0 + biggest)
}

struct Compiled {
    g: DMatrix<f64>,
    h: Vec<f64>,
    /// `Gᵀ (GGᵀ + I)⁻¹` and `(GGᵀ + I)⁻¹`.
    gt_minv: DMatrix<f64>,
    minv: DMatrix<f64>,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

fn compile(prob: &AffinePsdProblem) -> Result<Compiled> {
    let nx = prob.n_vars();
    let sizes: Vec<usize> = prob.constraints.iter().map(|c| c.size).collect();
    let mut offsets = vec![0];
    for &s in &sizes {
        offsets.push(offsets.last().unwrap() + svec_len(s));
    }
    let ns = *offsets.last().unwrap();
    let oriented = |c: &Constraint, vals: &[DMatrix<f64>]| {
        let f = (c.map)(vals);
        match c.sense {
            Sense::NegativeDefinite => f,
            Sense::PositiveDefinite => -f,
        }
    };

    let zero = vec![0.0; nx];
    let zero_vals = prob.unpack(&zero);
    let f0: Vec<DMatrix<f64>> = prob
        .constraints
        .iter()
        .map(|c| oriented(c, &zero_vals))
        .collect();
    let mut g = DMatrix::zeros(ns, nx);
    let mut e = vec![0.0; nx];
    let mut buf = vec![0.0; ns];
    for j in 0..nx {
        e[j] = 1.0;
        let vals = prob.unpack(&e);
        e[j] = 0.0;
        for (r, c) in prob.constraints.iter().enumerate() {
            let fj = oriented(c, &vals) - &f0[r];
            svec_into(&fj, &mut buf[offsets[r]..offsets[r + 1]]);
        }
        g.column_mut(j).copy_from_slice(&buf);
    }

    // Each constraint row block is divided by its largest coefficient norm.
    let mut h = vec![0.0; ns];
    for r in 0..sizes.len() {
        let rows = offsets[r]..offsets[r + 1];
        let scale = (0..nx)
            .map(|j| g.view((rows.start, j), (rows.len(), 1)).norm())
            .fold(0.0, f64::max);
        let scale = if scale > 0.0 { scale } else { 1.0 };
        g.rows_mut(rows.start, rows.len()).scale_mut(1.0 / scale);
        let mut f0v = vec![0.0; rows.len()];
        svec_into(&f0[r], &mut f0v);
        let mut eye = vec![0.0; rows.len()];
        svec_into(&DMatrix::identity(sizes[r], sizes[r]), &mut eye);
        for (k, idx) in rows.enumerate() {
            h[idx] = -f0v[k] / scale - prob.epsilon * eye[k];
        }
    }

    let m = &g * g.transpose() + DMatrix::identity(ns, ns);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::numerical("affine projector factorization failed"))?;
    let minv = chol.inverse();
    let gt_minv = g.transpose() * &minv;
    Ok(Compiled {
        g,
        h,
        gt_minv,
        minv,
        offsets,
        sizes,
    })
}

impl Compiled {
    fn project_affine(&self, x: &mut [f64], s: &mut [f64]) {
        let gx = &self.g * nalgebra::DVectorView::from_slice(x, x.len());
        let mut r = gx;
        for (k, v) in r.iter_mut().enumerate() {
            *v += s[k] - self.h[k];
        }
        let dx = &self.gt_minv * &r;
        let ds = &self.minv * &r;
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi -= d;
        }
        for (si, d) in s.iter_mut().zip(ds.iter()) {
            *si -= d;
        }
    }

    fn project_cone(&self, s: &[f64], out: &mut [f64]) -> Result<()> {
        for (r, &n) in self.sizes.iter().enumerate() {
            let range = self.offsets[r]..self.offsets[r + 1];
            let block = smat_slice(n, &s[range.clone()]);
            let proj = psd_project(&block)?;
            svec_into(proj.matrix(), &mut out[range]);
        }
        Ok(())
    }
}

/// Searches for a point satisfying every constraint of `prob` strictly.
pub fn solve_feasibility(
    prob: &AffinePsdProblem,
    opts: &SolveOptions,
) -> Result<FeasibilityResult> {
    if prob.constraints.is_empty() {
        return Err(Error::invalid("feasibility problem has no constraints"));
    }
    let c = compile(prob)?;
    let ns = c.h.len();
    let mut x = match &opts.start {
        Some(v) => prob.pack(v)?,
        None => vec![0.0; prob.n_vars()],
    };
    // s₀ = Π_K(h − G x₀)
    let gx = &c.g * nalgebra::DVectorView::from_slice(&x, x.len());
    let raw: Vec<f64> = c.h.iter().zip(gx.iter()).map(|(h, v)| h - v).collect();
    let mut s = vec![0.0; ns];
    c.project_cone(&raw, &mut s)?;

    let check_every = opts.check_every.max(1);
    let mut correction = vec![0.0; ns];
    let mut shifted = vec![0.0; ns];
    let mut last_margins = Vec::new();
    let mut last_values = prob.unpack(&x);
    for it in 0..=opts.max_iter {
        c.project_affine(&mut x, &mut s);
        if it % check_every == 0 || it == opts.max_iter {
            let values = prob.unpack(&x);
            let margins = prob.margins(&values)?;
            if margins.iter().all(|&m| m > opts.tol) {
                return Ok(FeasibilityResult {
                    status: FeasibilityStatus::Feasible,
                    values,
                    margins,
                    iterations: it,
                });
            }
            last_margins = margins;
            last_values = values;
        }
        if it == opts.max_iter {
            break;
        }
        for k in 0..ns {
            shifted[k] = s[k] + correction[k];
        }
        c.project_cone(&shifted, &mut s)?;
        for k in 0..ns {
            correction[k] = shifted[k] - s[k];
        }
    }
    Ok(FeasibilityResult {
        status: FeasibilityStatus::InfeasibleTimeout,
        values: last_values,
        margins: last_margins,
        iterations: opts.max_iter,
    })
}

/// `[[−D⁻¹, G], [Gᵀ, −P⁻¹]]`.
pub fn schur_block(g: &DMatrix<f64>, d: &SymMat, p_target: &SymMat) -> Result<SymMat> {
    let d_inv = d.inverse()?;
    let p_inv = p_target.inverse()?;
    Ok(assemble_block(d_inv.matrix(), g, p_inv.matrix()))
}

/// `Gᵀ D G − P⁻¹`, the form the Schur block encodes.
pub fn quadratic_form(g: &DMatrix<f64>, d: &SymMat, p_target: &SymMat) -> Result<SymMat> {
    let p_inv = p_target.inverse()?;
    Ok(&d.congruence(g) - &p_inv)
}

fn assemble_block(d_inv: &DMatrix<f64>, g: &DMatrix<f64>, p_inv: &DMatrix<f64>) -> SymMat {
    let (r, c) = g.shape();
    let mut out = DMatrix::zeros(r + c, r + c);
    out.view_mut((0, 0), (r, r)).copy_from(&(-d_inv));
    out.view_mut((0, r), (r, c)).copy_from(g);
    out.view_mut((r, 0), (c, r)).copy_from(&g.transpose());
    out.view_mut((r, r), (c, c)).copy_from(&(-p_inv));
    SymMat::symmetrize(out)
}

/// Map producing `[[−D⁻¹, G(x)], [G(x)ᵀ, −P⁻¹]]`, to be required `⪯ −εI`.
///
/// For fixed positive definite `D` and `P` this is affine in `x`, and it is
/// negative definite exactly when `G(x)ᵀ D G(x) − P⁻¹` is.
pub fn schur_embed(p_target: &SymMat, g: AffineMap, d: &SymMat) -> Result<AffineMap> {
    for (name, m) in [("target", p_target), ("weight", d)] {
        if m.min_eig()? <= 0.0 {
            return Err(Error::invalid(format!(
                "Schur embedding needs a positive definite {name} matrix"
            )));
        }
    }
    let d_inv = d.inverse()?.into_inner();
    let p_inv = p_target.inverse()?.into_inner();
    Ok(Arc::new(move |vals: &[DMatrix<f64>]| {
        let gv = g(vals);
        assemble_block(&d_inv, &gv, &p_inv).into_inner()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMat;

    fn scalar_lyapunov(a2: f64, eps: f64) -> FeasibilityResult {
        let mut prob = AffinePsdProblem::new(eps).unwrap();
        let x = prob.add_symmetric("x", 1);
        let i = x.index();
        prob.add_constraint(
            "lyap",
            Sense::NegativeDefinite,
            Arc::new(move |v: &[DMatrix<f64>]| &v[i] * a2 - &v[i]),
        )
        .unwrap();
        prob.require_positive_definite(x).unwrap();
        solve_feasibility(&prob, &SolveOptions::default()).unwrap()
    }

    #[test]
    fn stable_scalar_lyapunov_is_feasible() {
        let r = scalar_lyapunov(0.25, 1e-3);
        assert!(r.is_feasible());
        assert!(r.values[0][(0, 0)] > 0.0);
        assert!(r.min_margin() > 0.0);
    }

    #[test]
    fn unstable_scalar_lyapunov_times_out() {
        let r = scalar_lyapunov(1.44, 1e-3);
        assert_eq!(r.status, FeasibilityStatus::InfeasibleTimeout);
        assert_eq!(r.iterations, DEFAULT_MAX_ITER);
    }

    #[test]
    fn non_affine_maps_are_rejected() {
        let mut prob = AffinePsdProblem::new(1e-6).unwrap();
        let x = prob.add_symmetric("x", 2).index();
        let err = prob
            .add_constraint(
                "sq",
                Sense::NegativeDefinite,
                Arc::new(move |v: &[DMatrix<f64>]| &v[x] * &v[x]),
            )
            .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let err = prob
            .add_constraint(
                "skew",
                Sense::NegativeDefinite,
                Arc::new(move |v: &[DMatrix<f64>]| {
                    DMatrix::from_row_slice(2, 2, &[0.0, v[x][(0, 0)], 0.0, 0.0])
                }),
            )
            .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn rectangular_unknowns_work() {
        // Find y with [[-1, a + y], [a + y, -1]] ≺ 0, i.e. |a + y| < 1, for a = 3.
        let mut prob = AffinePsdProblem::new(1e-6).unwrap();
        let y = prob.add_rectangular("y", 1, 1).index();
        prob.add_constraint(
            "block",
            Sense::NegativeDefinite,
            Arc::new(move |v: &[DMatrix<f64>]| {
                let g = 3.0 + v[y][(0, 0)];
                DMatrix::from_row_slice(2, 2, &[-1.0, g, g, -1.0])
            }),
        )
        .unwrap();
        let r = solve_feasibility(&prob, &SolveOptions::default()).unwrap();
        assert!(r.is_feasible());
        assert!((3.0 + r.values[0][(0, 0)]).abs() < 1.0);
    }

    #[test]
    fn start_point_is_respected_when_already_feasible() {
        let mut prob = AffinePsdProblem::new(1e-6).unwrap();
        let x = prob.add_symmetric("x", 2);
        prob.require_positive_definite(x).unwrap();
        let start = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]);
        let opts = SolveOptions {
            start: Some(vec![start.clone()]),
            ..SolveOptions::default()
        };
        let r = solve_feasibility(&prob, &opts).unwrap();
        assert!(r.is_feasible());
        assert_eq!(r.iterations, 0);
        assert!((r.values[0].clone() - start).amax() < 1e-12);
    }

    #[test]
    fn zero_off_diagonal_block_embeds_as_negative_definite() {
        let d = SymMat::from_diagonal(&[2.0, 3.0]);
        let p = SymMat::from_diagonal(&[1.0, 4.0]);
        let block = schur_block(&DMatrix::zeros(2, 2), &d, &p).unwrap();
        assert!(block.min_eig().unwrap() < 0.0);
        assert!((-&block).min_eig().unwrap() > 0.0);
    }

    #[test]
    fn schur_embed_rejects_indefinite_inputs() {
        let g: AffineMap = Arc::new(|_: &[DMatrix<f64>]| DMatrix::zeros(2, 2));
        let bad = SymMat::from_diagonal(&[1.0, -1.0]);
        assert!(schur_embed(&bad, g.clone(), &SymMat::identity(2)).is_err());
        assert!(schur_embed(&SymMat::identity(2), g, &bad).is_err());
    }
}

//! Periodic coupled Lyapunov analysis of one plant under a fixed schedule.
//!
//! For a plant with modes `(A_s, A_u)` the step operator `T_τ` sends a pair
//! `(X_s, X_u)` to `(Y_s, Y_u)` with
//!
//! ```text
//! Y_k = A_kᵀ ((1-p) X_s + p X_u) A_k    if the plant holds slot τ+1
//! Y_k = A_kᵀ X_u A_k                    otherwise
//! ```
//!
//! (slot `ℓ+1` wraps to slot 1). The plant is exponentially second-moment
//! stable exactly when `T_1 ∘ … ∘ T_ℓ` has spectral radius below one, and then
//! `P_τ = I + T_τ(P_{τ+1})` with `P_{ℓ+1} = P_1` is a certificate whose
//! residuals are all the identity.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{smat_slice, solve_dense, spectral_radius, svec_into, svec_len, SymMat};
use crate::lmi::{
    default_epsilon, solve_feasibility, AffineMap, AffinePsdProblem, FeasibilityResult, Sense,
    SolveOptions,
};
use crate::model::{Mode, ModePair, PeriodicSchedule};

/// Default strictness on the monodromy radius.
pub const ESMS_TOL: f64 = 1e-9;

/// Relative floor on the smallest eigenvalue of each certificate matrix.
pub const PD_FLOOR_REL: f64 = 1e-9;

const MAX_PAIR_COORDS: usize = 10_000;

/// A symmetric matrix per mode, indexed by [`Mode::index`].
pub type ModeMats = [SymMat; 2];

/// One step of the backward coupled recursion.
#[derive(Debug, Clone, Copy)]
pub struct StepOperator<'a> {
    pub scheduled: bool,
    pub p: f64,
    pub modes: &'a ModePair,
}

impl StepOperator<'_> {
    pub fn apply(&self, x: &ModeMats) -> ModeMats {
        let w = self.weighted(x);
        [
            w.congruence(self.modes.stable()),
            w.congruence(self.modes.unstable()),
        ]
    }

    /// The matrix each mode sees: `(1-p)X_s + pX_u` or `X_u`.
    pub fn weighted(&self, x: &ModeMats) -> SymMat {
        if self.scheduled {
            &(&x[0] * (1.0 - self.p)) + &(&x[1] * self.p)
        } else {
            x[1].clone()
        }
    }
}

/// Whether step `tau` (1-based) sees the plant scheduled: slot `tau + 1`,
/// with slot `ℓ + 1` read as slot 1.
pub fn step_scheduled(membership: &[bool], tau: usize) -> bool {
    membership[tau % membership.len()]
}

fn step<'a>(modes: &'a ModePair, membership: &[bool], p: f64, tau: usize) -> StepOperator<'a> {
    StepOperator {
        scheduled: step_scheduled(membership, tau),
        p,
        modes,
    }
}

fn check_inputs(modes: &ModePair, membership: &[bool], p: f64) -> Result<()> {
    if membership.is_empty() {
        return Err(Error::invalid("schedule period must be positive"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    let d = modes.dim();
    if d * (d + 1) > MAX_PAIR_COORDS {
        return Err(Error::Capacity(format!(
            "monodromy of a {d}-dimensional plant needs {} coordinates (limit {MAX_PAIR_COORDS})",
            d * (d + 1)
        )));
    }
    Ok(())
}

/// Monodromy `T_1 ∘ … ∘ T_ℓ` in svec coordinates, stable block first.
pub fn monodromy(
    modes: &ModePair,
    schedule: &PeriodicSchedule,
    plant: usize,
    p: f64,
) -> Result<DMatrix<f64>> {
    monodromy_for_membership(modes, &schedule.membership(plant)?, p)
}

/// [`monodromy`] for a plant whose slot membership is `membership[q]`.
pub fn monodromy_for_membership(
    modes: &ModePair,
    membership: &[bool],
    p: f64,
) -> Result<DMatrix<f64>> {
    check_inputs(modes, membership, p)?;
    let d = modes.dim();
    let n = svec_len(d);
    let l = membership.len();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    let mut basis = vec![0.0; 2 * n];
    for j in 0..2 * n {
        basis[j] = 1.0;
        let mut x = [smat_slice(d, &basis[..n]), smat_slice(d, &basis[n..])];
        basis[j] = 0.0;
        for tau in (1..=l).rev() {
            x = step(modes, membership, p, tau).apply(&x);
        }
        let mut col = out.column_mut(j);
        let (top, bottom) = col.as_mut_slice().split_at_mut(n);
        svec_into(x[0].matrix(), top);
        svec_into(x[1].matrix(), bottom);
    }
    Ok(out)
}

/// Outcome of the spectral-radius test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsmsReport {
    pub esms: bool,
    pub radius: f64,
}

pub fn is_esms(
    modes: &ModePair,
    schedule: &PeriodicSchedule,
    plant: usize,
    p: f64,
    tol: f64,
) -> Result<EsmsReport> {
    is_esms_for_membership(modes, &schedule.membership(plant)?, p, tol)
}

pub fn is_esms_for_membership(
    modes: &ModePair,
    membership: &[bool],
    p: f64,
    tol: f64,
) -> Result<EsmsReport> {
    let radius = spectral_radius(&monodromy_for_membership(modes, membership, p)?)?;
    Ok(EsmsReport {
        esms: radius < 1.0 - tol,
        radius,
    })
}

/// Coupled Lyapunov matrices for one plant with their verified residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledCertificate {
    pub plant: usize,
    /// `p[τ - 1][k]` for `τ = 1..=ℓ`.
    pub p: Vec<ModeMats>,
    /// `q[τ - 1][k] = P_τ(k) − [T_τ(P_{τ+1})]_k`.
    pub q: Vec<ModeMats>,
    /// Smallest eigenvalue over all residuals.
    pub margin: f64,
    /// Smallest eigenvalue over all `P`.
    pub pd_floor: f64,
    pub radius: f64,
}

impl CoupledCertificate {
    pub fn period(&self) -> usize {
        self.p.len()
    }

    pub fn is_valid(&self) -> bool {
        self.margin > 0.0 && self.pd_floor > 0.0
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(CertificateJson::from(self))
            .expect("certificate serialization cannot fail")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let json: CertificateJson = serde_json::from_value(value)
            .map_err(|e| Error::invalid(format!("malformed certificate: {e}")))?;
        json.try_into()
    }
}

/// Serialized form: `P[τ][k]` and `Q[τ][k]` as row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateJson {
    plant: usize,
    period: usize,
    #[serde(rename = "P")]
    p: Vec<[Vec<Vec<f64>>; 2]>,
    #[serde(rename = "Q")]
    q: Vec<[Vec<Vec<f64>>; 2]>,
    margin: f64,
    pd_floor: f64,
    radius: f64,
}

impl From<&CoupledCertificate> for CertificateJson {
    fn from(c: &CoupledCertificate) -> Self {
        let rows = |v: &[ModeMats]| v.iter().map(|m| [m[0].to_rows(), m[1].to_rows()]).collect();
        CertificateJson {
            plant: c.plant,
            period: c.period(),
            p: rows(&c.p),
            q: rows(&c.q),
            margin: c.margin,
            pd_floor: c.pd_floor,
            radius: c.radius,
        }
    }
}

impl TryFrom<CertificateJson> for CoupledCertificate {
    type Error = Error;

    fn try_from(j: CertificateJson) -> Result<Self> {
        let mats = |v: Vec<[Vec<Vec<f64>>; 2]>| -> Result<Vec<ModeMats>> {
            v.into_iter()
                .map(|[s, u]| Ok([SymMat::from_rows(&s)?, SymMat::from_rows(&u)?]))
                .collect()
        };
        let p = mats(j.p)?;
        let q = mats(j.q)?;
        if p.len() != j.period || q.len() != j.period {
            return Err(Error::invalid(
                "certificate period does not match its matrices",
            ));
        }
        Ok(CoupledCertificate {
            plant: j.plant,
            p,
            q,
            margin: j.margin,
            pd_floor: j.pd_floor,
            radius: j.radius,
        })
    }
}

/// Residuals of a candidate certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub q: Vec<ModeMats>,
    pub margin: f64,
    pub pd_floor: f64,
    /// `margin > 0` and every `P` clears the relative definiteness floor.
    pub valid: bool,
}

pub fn verify_certificate(
    modes: &ModePair,
    schedule: &PeriodicSchedule,
    plant: usize,
    p: f64,
    ps: &[ModeMats],
) -> Result<CertificateReport> {
    verify_for_membership(modes, &schedule.membership(plant)?, p, ps)
}

pub fn verify_for_membership(
    modes: &ModePair,
    membership: &[bool],
    p: f64,
    ps: &[ModeMats],
) -> Result<CertificateReport> {
    check_inputs(modes, membership, p)?;
    let l = membership.len();
    if ps.len() != l {
        return Err(Error::invalid(format!(
            "certificate has {} time indices, schedule period is {l}",
            ps.len()
        )));
    }
    let d = modes.dim();
    if ps.iter().flatten().any(|m| m.dim() != d) {
        return Err(Error::invalid(format!(
            "certificate matrices must be {d}x{d}"
        )));
    }
    let mut q = Vec::with_capacity(l);
    let mut margin = f64::INFINITY;
    let mut pd_floor = f64::INFINITY;
    let mut floors_ok = true;
    for tau in 1..=l {
        let next = &ps[tau % l];
        let image = step(modes, membership, p, tau).apply(next);
        let here = &ps[tau - 1];
        let residual: ModeMats = [&here[0] - &image[0], &here[1] - &image[1]];
        for k in Mode::ALL {
            margin = margin.min(residual[k.index()].min_eig()?);
            let floor = here[k.index()].min_eig()?;
            pd_floor = pd_floor.min(floor);
            floors_ok &= floor > PD_FLOOR_REL * here[k.index()].frobenius_norm();
        }
        q.push(residual);
    }
    Ok(CertificateReport {
        q,
        margin,
        pd_floor,
        valid: margin > 0.0 && pd_floor > 0.0 && floors_ok,
    })
}

/// Certificate with all residuals equal to the identity.
pub fn solve_certificate(
    modes: &ModePair,
    schedule: &PeriodicSchedule,
    plant: usize,
    p: f64,
) -> Result<CoupledCertificate> {
    solve_certificate_for_membership(modes, &schedule.membership(plant)?, p, plant)
}

pub fn solve_certificate_for_membership(
    modes: &ModePair,
    membership: &[bool],
    p: f64,
    plant: usize,
) -> Result<CoupledCertificate> {
    let mono = monodromy_for_membership(modes, membership, p)?;
    let radius = spectral_radius(&mono)?;
    if radius >= 1.0 {
        return Err(Error::Infeasible(format!(
            "plant {plant}: monodromy radius {radius:.6} is not below 1"
        )));
    }
    let d = modes.dim();
    let n = svec_len(d);
    let l = membership.len();
    let ident = || [SymMat::identity(d), SymMat::identity(d)];
    let add_identity = |x: ModeMats| -> ModeMats {
        let i = SymMat::identity(d);
        [&x[0] + &i, &x[1] + &i]
    };

    // b = I + T_1(I + T_2(… I + T_{ℓ-1}(I)))
    let mut acc = ident();
    for tau in (1..l).rev() {
        acc = add_identity(step(modes, membership, p, tau).apply(&acc));
    }
    let mut rhs = DVector::zeros(2 * n);
    {
        let (top, bottom) = rhs.as_mut_slice().split_at_mut(n);
        svec_into(acc[0].matrix(), top);
        svec_into(acc[1].matrix(), bottom);
    }
    let lhs = DMatrix::identity(2 * n, 2 * n) - mono;
    let sol = solve_dense(&lhs, &rhs)?;
    let p1 = [
        smat_slice(d, &sol.as_slice()[..n]),
        smat_slice(d, &sol.as_slice()[n..]),
    ];

    let mut ps = vec![p1.clone(); l];
    for tau in (2..=l).rev() {
        let next = if tau == l {
            p1.clone()
        } else {
            ps[tau].clone()
        };
        ps[tau - 1] = add_identity(step(modes, membership, p, tau).apply(&next));
    }
    let report = verify_for_membership(modes, membership, p, &ps)?;
    if !report.valid {
        return Err(Error::numerical(format!(
            "plant {plant}: constructed certificate failed verification (margin {:.3e})",
            report.margin
        )));
    }
    Ok(CoupledCertificate {
        plant,
        p: ps,
        q: report.q,
        margin: report.margin,
        pd_floor: report.pd_floor,
        radius,
    })
}

/// Largest deviation of any residual from the identity.
pub fn identity_residual_error(cert: &CoupledCertificate) -> f64 {
    let d = cert.p[0][0].dim();
    let eye = DMatrix::<f64>::identity(d, d);
    cert.q
        .iter()
        .flatten()
        .map(|q| (q.matrix() - &eye).amax())
        .fold(0.0, f64::max)
}

/// The certificate conditions as an affine PSD feasibility problem in the
/// `2ℓ` unknowns `P_τ(k)` (block `2(τ−1) + k`), each required to be
/// positive definite with `T_τ(P_{τ+1})_k ≺ P_τ(k)`.
pub fn certificate_problem(
    modes: &ModePair,
    membership: &[bool],
    p: f64,
) -> Result<AffinePsdProblem> {
    check_inputs(modes, membership, p)?;
    let l = membership.len();
    let d = modes.dim();
    let mut prob = AffinePsdProblem::new(default_epsilon(&[modes.stable(), modes.unstable()]))?;
    let mut ids = Vec::with_capacity(2 * l);
    for tau in 1..=l {
        for mode in Mode::ALL {
            ids.push(prob.add_symmetric(format!("P{tau}({mode:?})"), d));
        }
    }
    for tau in 1..=l {
        let next = tau % l;
        let scheduled = step_scheduled(membership, tau);
        for mode in Mode::ALL {
            let a = modes.get(mode).clone();
            let own = 2 * (tau - 1) + mode.index();
            let map: AffineMap = Arc::new(move |v: &[DMatrix<f64>]| {
                let xu = &v[2 * next + 1];
                let w = if scheduled {
                    &v[2 * next] * (1.0 - p) + xu * p
                } else {
                    xu.clone()
                };
                a.transpose() * w * &a - &v[own]
            });
            prob.add_constraint(
                format!("step {tau} ({mode:?})"),
                Sense::NegativeDefinite,
                map,
            )?;
        }
    }
    for id in ids {
        prob.require_positive_definite(id)?;
    }
    Ok(prob)
}

/// Searches for a certificate with the projection engine instead of the
/// monodromy solve.
pub fn certificate_feasibility(
    modes: &ModePair,
    membership: &[bool],
    p: f64,
    max_iter: usize,
) -> Result<FeasibilityResult> {
    let prob = certificate_problem(modes, membership, p)?;
    solve_feasibility(
        &prob,
        &SolveOptions {
            max_iter,
            ..SolveOptions::default()
        },
    )
}

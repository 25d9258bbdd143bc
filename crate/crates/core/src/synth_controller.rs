//! Staged LMI synthesis of static state-feedback gains.
//!
//! For each candidate schedule and each plant:
//!
//! 1. find `P_τ(u)` for every slot and `P_q(s)` for every slot the plant
//!    holds, satisfying the open-loop half of the coupled conditions;
//! 2. for some held slot `q`, find `Y` making the Schur-embedded gain
//!    inequality negative definite, and set `K = Y·P_q(s)`;
//! 3. with `K` fixed, solve for the remaining `P_τ(s)`.
//!
//! Every candidate whose plants all pass is then validated by running the
//! exact schedule search with the new gains; gains are only returned once
//! that validation yields a schedule.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::{min_eig, SymMat};
use crate::lmi::{
    default_epsilon, schur_embed, solve_feasibility, AffineMap, AffinePsdProblem, BlockId, Sense,
    SolveOptions,
};
use crate::lyapunov::is_esms_for_membership;
use crate::model::{NetworkConfig, Plant};
use crate::riccati::dare;
use crate::synth_schedule::{
    design_schedule, enumerate_gamma, gamma_count, GammaCandidate, ScheduleOptions,
    ScheduleOutcome, ScheduleVerdict, LARGE_SEARCH,
};

/// Which matrix turns `Y` into `K` when the plant also holds slot `q + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainRecovery {
    /// `K = Y·P_q(s)` in every case.
    #[default]
    Verbatim,
    /// `K = Y·((1−p)P_{q+1}(s) + pP_{q+1}(u))` when `q + 1` is held too.
    Averaged,
}

/// Start point for stage 1: the Riccati cost-to-go of `(A, B)` with state
/// weight `state_weight·I` and input weight `I`, scaled to unit spectral norm,
/// used for every `P(s)` and multiplied by `unstable_scale` for every `P(u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub state_weight: f64,
    pub unstable_scale: f64,
}

/// Stage-1 start points tried in order; `None` starts from zero.
pub fn default_anchors() -> Vec<Option<Anchor>> {
    let mut out: Vec<Option<Anchor>> = [5.0, 25.0, 1.0]
        .iter()
        .flat_map(|&w| {
            [1.0, 0.5].map(|u| {
                Some(Anchor {
                    state_weight: w,
                    unstable_scale: u,
                })
            })
        })
        .collect();
    out.push(None);
    out
}

#[derive(Debug, Clone)]
pub struct ControllerOptions {
    pub recovery: GainRecovery,
    pub max_iter: usize,
    pub anchors: Vec<Option<Anchor>>,
    /// Used for the final validation and the candidate-count guard.
    pub schedule: ScheduleOptions,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        ControllerOptions {
            recovery: GainRecovery::Verbatim,
            max_iter: crate::lmi::DEFAULT_MAX_ITER,
            anchors: default_anchors(),
            schedule: ScheduleOptions::default(),
        }
    }
}

/// Stage-1 matrices for one plant under one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOneSolution {
    pub plant: usize,
    /// `p_u[τ - 1]` for `τ = 1..=ℓ`.
    pub p_u: Vec<SymMat>,
    /// `p_s[q - 1]`, present exactly for the slots the plant holds.
    pub p_s: Vec<Option<SymMat>>,
}

/// Stage-2 result: the slot used and the free variable `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoSolution {
    /// 1-based slot index.
    pub q: usize,
    pub y: DMatrix<f64>,
}

fn next_slot(q0: usize, l: usize) -> usize {
    (q0 + 1) % l
}

fn averaged(s1: &StageOneSolution, n0: usize, p: f64) -> SymMat {
    let ps = s1.p_s[n0]
        .as_ref()
        .expect("held slot has a stable-mode matrix");
    &(ps * (1.0 - p)) + &(&s1.p_u[n0] * p)
}

/// Stage 1: open-loop conditions on `P(u)` with one `P(s)` per held slot.
#[allow(clippy::too_many_arguments)]
pub fn stage1_solve(
    plant: &Plant,
    plant_id: usize,
    candidate: &GammaCandidate,
    p: f64,
    epsilon: f64,
    start: Option<&DMatrix<f64>>,
    unstable_scale: f64,
    max_iter: usize,
) -> Result<Option<StageOneSolution>> {
    let member = candidate.membership(plant_id);
    let l = member.len();
    let d = plant.state_dim();
    let a = plant.a().clone();
    let mut prob = AffinePsdProblem::new(epsilon)?;
    let pu_ids: Vec<BlockId> = (1..=l)
        .map(|t| prob.add_symmetric(format!("Pu{t}"), d))
        .collect();
    let ps_ids: Vec<Option<BlockId>> = (1..=l)
        .map(|q| member[q - 1].then(|| prob.add_symmetric(format!("Ps{q}"), d)))
        .collect();
    let pu: Vec<usize> = pu_ids.iter().map(|b| b.index()).collect();
    let ps: Vec<Option<usize>> = ps_ids.iter().map(|b| b.map(BlockId::index)).collect();

    for tau in 1..=l {
        let n0 = next_slot(tau - 1, l);
        let (here, next_u, next_s) = (pu[tau - 1], pu[n0], ps[n0]);
        let a = a.clone();
        let map: AffineMap = Arc::new(move |v: &[DMatrix<f64>]| {
            let w = match next_s {
                Some(s) => &v[s] * (1.0 - p) + &v[next_u] * p,
                None => v[next_u].clone(),
            };
            a.transpose() * w * &a - &v[here]
        });
        prob.add_constraint(format!("open loop τ={tau}"), Sense::NegativeDefinite, map)?;
    }
    for &id in pu_ids.iter().chain(ps_ids.iter().flatten()) {
        prob.require_positive_definite(id)?;
    }

    let start_values = start.map(|anchor| {
        let mut vals = Vec::new();
        vals.extend(pu.iter().map(|_| anchor * unstable_scale));
        vals.extend(ps.iter().flatten().map(|_| anchor.clone()));
        vals
    });
    let res = solve_feasibility(
        &prob,
        &SolveOptions {
            max_iter,
            start: start_values,
            ..SolveOptions::default()
        },
    )?;
    if !res.is_feasible() {
        return Ok(None);
    }
    let sym = |idx: usize| SymMat::symmetrize(res.values[idx].clone());
    Ok(Some(StageOneSolution {
        plant: plant_id,
        p_u: pu.iter().map(|&i| sym(i)).collect(),
        p_s: ps.iter().map(|o| o.map(sym)).collect(),
    }))
}

/// Stage 2: the first held slot `q` (ascending) whose gain inequality is feasible.
pub fn stage2_solve(
    plant: &Plant,
    candidate: &GammaCandidate,
    p: f64,
    s1: &StageOneSolution,
    epsilon: f64,
    max_iter: usize,
) -> Result<Option<StageTwoSolution>> {
    let member = candidate.membership(s1.plant);
    let l = member.len();
    let (d, m) = (plant.state_dim(), plant.input_dim());
    for q0 in (0..l).filter(|&q| member[q]) {
        let n0 = next_slot(q0, l);
        let pqs = s1.p_s[q0]
            .as_ref()
            .expect("held slot has a stable-mode matrix");
        let weight = &s1.p_u[n0];
        let left = if member[n0] {
            plant.a() * averaged(s1, n0, p).inverse()?.matrix()
        } else {
            plant.a() * pqs.inverse()?.matrix()
        };
        let mut prob = AffinePsdProblem::new(epsilon)?;
        let y = prob.add_rectangular("Y", m, d).index();
        let b = plant.b().clone();
        let g: AffineMap = Arc::new(move |v: &[DMatrix<f64>]| &left + &b * &v[y]);
        prob.add_constraint(
            format!("gain q={}", q0 + 1),
            Sense::NegativeDefinite,
            schur_embed(pqs, g, weight)?,
        )?;
        let res = solve_feasibility(
            &prob,
            &SolveOptions {
                max_iter,
                ..SolveOptions::default()
            },
        )?;
        if res.is_feasible() {
            return Ok(Some(StageTwoSolution {
                q: q0 + 1,
                y: res.values[y].clone(),
            }));
        }
    }
    Ok(None)
}

/// `K = Y·P`.
pub fn extract_gain(y: &DMatrix<f64>, p: &SymMat) -> Result<DMatrix<f64>> {
    if y.ncols() != p.dim() {
        return Err(Error::invalid(format!(
            "Y is {}x{} but P is {}x{}",
            y.nrows(),
            y.ncols(),
            p.dim(),
            p.dim()
        )));
    }
    Ok(y * p.matrix())
}

/// Gain for the chosen recovery rule.
pub fn recover_gain(
    s1: &StageOneSolution,
    s2: &StageTwoSolution,
    candidate: &GammaCandidate,
    p: f64,
    recovery: GainRecovery,
) -> Result<DMatrix<f64>> {
    let member = candidate.membership(s1.plant);
    let q0 = s2.q - 1;
    let n0 = next_slot(q0, member.len());
    let pqs = s1.p_s[q0]
        .as_ref()
        .expect("held slot has a stable-mode matrix");
    match recovery {
        GainRecovery::Averaged if member[n0] => extract_gain(&s2.y, &averaged(s1, n0, p)),
        _ => extract_gain(&s2.y, pqs),
    }
}

/// Stage 3: closed-loop conditions with `K`, `P_q(s)` and every `P(u)` fixed.
/// Returns `P_τ(s)` for `τ = 1..=ℓ`.
#[allow(clippy::too_many_arguments)]
pub fn stage3_solve(
    plant: &Plant,
    candidate: &GammaCandidate,
    p: f64,
    k: &DMatrix<f64>,
    s1: &StageOneSolution,
    q: usize,
    epsilon: f64,
    max_iter: usize,
) -> Result<Option<Vec<SymMat>>> {
    let member = candidate.membership(s1.plant);
    let l = member.len();
    let d = plant.state_dim();
    let acl = plant.a() + plant.b() * k;
    let fixed = s1.p_s[q - 1]
        .clone()
        .expect("held slot has a stable-mode matrix")
        .into_inner();
    let mut prob = AffinePsdProblem::new(epsilon)?;
    let free_ids: Vec<Option<BlockId>> = (1..=l)
        .map(|t| (t != q).then(|| prob.add_symmetric(format!("Ps{t}"), d)))
        .collect();
    let free: Vec<Option<usize>> = free_ids.iter().map(|b| b.map(BlockId::index)).collect();

    let mut maps = Vec::new();
    for tau in 1..=l {
        let n0 = next_slot(tau - 1, l);
        let (acl, fixed, free) = (acl.clone(), fixed.clone(), free.clone());
        let pu_next = s1.p_u[n0].matrix().clone();
        let held = member[n0];
        let map: AffineMap = Arc::new(move |v: &[DMatrix<f64>]| {
            let ps = |t0: usize| free[t0].map_or_else(|| fixed.clone(), |i| v[i].clone());
            let w = if held {
                ps(n0) * (1.0 - p) + &pu_next * p
            } else {
                pu_next.clone()
            };
            acl.transpose() * w * &acl - ps(tau - 1)
        });
        maps.push(map.clone());
        prob.add_constraint(format!("closed loop τ={tau}"), Sense::NegativeDefinite, map)?;
    }
    let assemble = |vals: &[DMatrix<f64>]| -> Vec<SymMat> {
        free.iter()
            .map(|f| SymMat::symmetrize(f.map_or_else(|| fixed.clone(), |i| vals[i].clone())))
            .collect()
    };

    if free.iter().all(Option::is_none) {
        for map in &maps {
            if min_eig(&SymMat::new(-map(&[]))?)? <= 0.0 {
                return Ok(None);
            }
        }
        return Ok(Some(assemble(&[])));
    }
    for &id in free_ids.iter().flatten() {
        prob.require_positive_definite(id)?;
    }
    let res = solve_feasibility(
        &prob,
        &SolveOptions {
            max_iter,
            ..SolveOptions::default()
        },
    )?;
    Ok(res.is_feasible().then(|| assemble(&res.values)))
}

/// Gain found for one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantGain {
    pub plant: usize,
    /// 1-based slot used in stage 2.
    pub q: usize,
    pub y: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub anchor: Option<Anchor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GainOutcome {
    Success {
        gains: Vec<PlantGain>,
        candidate: GammaCandidate,
        /// Monodromy radius of each plant with its new gain under `candidate`.
        candidate_radii: Vec<f64>,
        validation: ScheduleVerdict,
    },
    Fail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainResult {
    pub outcome: GainOutcome,
    pub candidates_examined: usize,
    pub diagnostics: Vec<String>,
}

impl GainResult {
    pub fn to_json_value(&self) -> Option<serde_json::Value> {
        let GainOutcome::Success {
            gains,
            candidate,
            validation,
            ..
        } = &self.outcome
        else {
            return None;
        };
        Some(json!({
            "gains": gains.iter().map(|g| json!({
                "plant": g.plant,
                "K": crate::linalg::matrix_to_rows(&g.k),
                "q": g.q,
            })).collect::<Vec<_>>(),
            "candidate": candidate.sets,
            "validation": validation.to_json_value(),
        }))
    }
}

/// Runs the three stages for one plant, walking the anchor ladder.
pub fn design_plant_gain(
    plant: &Plant,
    plant_id: usize,
    candidate: &GammaCandidate,
    p: f64,
    opts: &ControllerOptions,
) -> Result<std::result::Result<PlantGain, String>> {
    let eps = default_epsilon(&[plant.a(), plant.b()]);
    let d = plant.state_dim();
    let m = plant.input_dim();
    let mut last = String::from("no start point tried");
    for anchor in &opts.anchors {
        let start = match anchor {
            Some(a) => match dare(
                plant.a(),
                plant.b(),
                &(DMatrix::identity(d, d) * a.state_weight),
                &DMatrix::identity(m, m),
            ) {
                Ok(pd) => {
                    let norm = pd.clone().svd(false, false).singular_values.max();
                    Some(pd / norm)
                }
                Err(_) => continue,
            },
            None => None,
        };
        let scale = anchor.map_or(1.0, |a| a.unstable_scale);
        let Some(s1) = stage1_solve(
            plant,
            plant_id,
            candidate,
            p,
            eps,
            start.as_ref(),
            scale,
            opts.max_iter,
        )?
        else {
            return Ok(Err(format!("plant {plant_id}: stage 1 infeasible")));
        };
        let Some(s2) = stage2_solve(plant, candidate, p, &s1, eps, opts.max_iter)? else {
            last = format!("plant {plant_id}: stage 2 infeasible for every held slot");
            continue;
        };
        let k = recover_gain(&s1, &s2, candidate, p, opts.recovery)?;
        if stage3_solve(plant, candidate, p, &k, &s1, s2.q, eps, opts.max_iter)?.is_none() {
            last = format!("plant {plant_id}: stage 3 infeasible (q = {})", s2.q);
            continue;
        }
        return Ok(Ok(PlantGain {
            plant: plant_id,
            q: s2.q,
            y: s2.y,
            k,
            anchor: *anchor,
        }));
    }
    Ok(Err(last))
}

/// Searches candidates for gains that make the schedule conditions hold.
pub fn design_controllers(
    plants: &[Plant],
    network: &NetworkConfig,
    l: usize,
    opts: &ControllerOptions,
) -> Result<GainResult> {
    let n = plants.len();
    network.check_plants(n)?;
    let (m, p) = (network.capacity(), network.loss_probability());
    let mut result = GainResult {
        outcome: GainOutcome::Fail,
        candidates_examined: 0,
        diagnostics: Vec::new(),
    };
    let count = gamma_count(n, m, l);
    if !opts.schedule.allow_large && count.is_none_or(|c| c > LARGE_SEARCH) {
        return Err(Error::Capacity(format!(
            "period {l} yields too many candidate schedules (limit {LARGE_SEARCH}); pass the large-search override to proceed"
        )));
    }

    'candidates: for cand in enumerate_gamma(n, m, l)? {
        result.candidates_examined += 1;
        let mut gains = Vec::with_capacity(n);
        for (i, plant) in plants.iter().enumerate() {
            match design_plant_gain(plant, i + 1, &cand, p, opts)? {
                Ok(g) => gains.push(g),
                Err(why) => {
                    result
                        .diagnostics
                        .push(format!("candidate {:?}: {why}", cand.sets));
                    continue 'candidates;
                }
            }
        }
        let closed: Vec<Plant> = plants
            .iter()
            .zip(&gains)
            .map(|(pl, g)| pl.with_gain(g.k.clone()))
            .collect::<Result<_>>()?;
        let mut candidate_radii = Vec::with_capacity(n);
        for (i, pl) in closed.iter().enumerate() {
            let r = is_esms_for_membership(
                &pl.mode_pair()?,
                &cand.membership(i + 1),
                p,
                opts.schedule.tol,
            )?;
            candidate_radii.push(r.radius);
        }
        if candidate_radii
            .iter()
            .any(|&r| r.is_nan() || r >= 1.0 - opts.schedule.tol)
        {
            result.diagnostics.push(format!(
                "candidate {:?}: stages passed but radii {candidate_radii:?} are not all below 1",
                cand.sets
            ));
            continue;
        }
        let validation = design_schedule(&closed, network, l, &opts.schedule)?;
        if !matches!(validation.outcome, ScheduleOutcome::Schedule { .. }) {
            result.diagnostics.push(format!(
                "candidate {:?}: final validation found no schedule",
                cand.sets
            ));
            continue;
        }
        result.outcome = GainOutcome::Success {
            gains,
            candidate: cand,
            candidate_radii,
            validation,
        };
        return Ok(result);
    }
    Ok(result)
}

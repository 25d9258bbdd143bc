//! Search for a stabilizing periodic schedule of a given period.
//!
//! Candidates are ordered ℓ-tuples of pairwise-distinct `M`-subsets of the
//! plants whose union covers every plant. A candidate is accepted when every
//! plant's monodromy radius under it is below one; each accepted plant then
//! gets an explicit coupled Lyapunov certificate. Because the radius test is
//! exact, exhausting all candidates certifies that no stabilizing schedule of
//! that period exists.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lyapunov::{
    is_esms_for_membership, solve_certificate_for_membership, CoupledCertificate, ESMS_TOL,
};
use crate::model::{lmin, schedule_from_sets, ModePair, NetworkConfig, PeriodicSchedule, Plant};

/// Candidate count above which a search needs `allow_large`.
pub const LARGE_SEARCH: u128 = 1_000_000;

/// Largest number of `M`-subsets the enumerator will materialize.
const MAX_SUBSETS: u128 = 10_000_000;

/// Masks are precomputed per plant when `2^ℓ` is at most this.
const PRECOMPUTE_MASKS: usize = 256;

/// An ordered tuple of distinct subsets covering all plants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GammaCandidate {
    pub sets: Vec<Vec<usize>>,
}

impl GammaCandidate {
    pub fn period(&self) -> usize {
        self.sets.len()
    }

    /// `membership[q] = plant ∈ sets[q]`.
    pub fn membership(&self, plant: usize) -> Vec<bool> {
        self.sets.iter().map(|s| s.contains(&plant)).collect()
    }

    pub fn to_schedule(&self, n_plants: usize, capacity: usize) -> Result<PeriodicSchedule> {
        schedule_from_sets(&self.sets, n_plants, capacity)
    }
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

fn falling(n: u128, k: usize) -> Option<u128> {
    if (k as u128) > n {
        return Some(0);
    }
    (0..k as u128).try_fold(1u128, |acc, i| acc.checked_mul(n - i))
}

/// Exact number of candidates, or `None` if it does not fit in 128 bits.
pub fn gamma_count(n: usize, m: usize, l: usize) -> Option<u128> {
    let mut total: i128 = 0;
    for j in 0..=n {
        let ways = binomial(n, j)?;
        let term = falling(binomial(n - j, m)?, l)?;
        let signed = i128::try_from(ways.checked_mul(term)?).ok()?;
        total = if j % 2 == 0 {
            total.checked_add(signed)?
        } else {
            total.checked_sub(signed)?
        };
    }
    u128::try_from(total).ok()
}

/// Lexicographic stream of [`GammaCandidate`]s.
pub struct GammaIter {
    n: usize,
    m: usize,
    l: usize,
    subsets: Vec<Vec<usize>>,
    stack: Vec<usize>,
    cursor: Vec<usize>,
    used: Vec<bool>,
    cover: Vec<u32>,
    covered: usize,
    done: bool,
}

/// All candidates for `N` plants, `M` channels and period `ℓ`, in
/// lexicographic order of subset indices (subsets themselves ordered
/// lexicographically). Empty when `ℓ` is below the minimum or exceeds the
/// number of distinct subsets.
pub fn enumerate_gamma(n: usize, m: usize, l: usize) -> Result<GammaIter> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "subset size {m} invalid for {n} plants"
        )));
    }
    if l == 0 {
        return Err(Error::invalid("period must be positive"));
    }
    let count = binomial(n, m).unwrap_or(u128::MAX);
    if count > MAX_SUBSETS {
        return Err(Error::Capacity(format!(
            "{count} subsets of size {m} out of {n} plants is too many to enumerate"
        )));
    }
    let subsets = combinations(n, m);
    let impossible = l > subsets.len() || l * m < n;
    Ok(GammaIter {
        n,
        m,
        l,
        used: vec![false; subsets.len()],
        subsets,
        stack: Vec::with_capacity(l),
        cursor: vec![0; l + 1],
        cover: vec![0; n + 1],
        covered: 0,
        done: impossible,
    })
}

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (1..=m).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..m).rev().find(|&i| cur[i] < n - (m - 1 - i)) else {
            return out;
        };
        cur[i] += 1;
        for j in (i + 1)..m {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

impl GammaIter {
    fn push(&mut self, idx: usize) {
        self.used[idx] = true;
        for &j in &self.subsets[idx] {
            if self.cover[j] == 0 {
                self.covered += 1;
            }
            self.cover[j] += 1;
        }
        self.stack.push(idx);
    }

    fn pop(&mut self) {
        let idx = self.stack.pop().expect("pop on empty stack");
        self.used[idx] = false;
        for &j in &self.subsets[idx] {
            self.cover[j] -= 1;
            if self.cover[j] == 0 {
                self.covered -= 1;
            }
        }
    }
}

impl Iterator for GammaIter {
    type Item = GammaCandidate;

    fn next(&mut self) -> Option<GammaCandidate> {
        if self.done {
            return None;
        }
        loop {
            let depth = self.stack.len();
            if depth == self.l {
                let out = GammaCandidate {
                    sets: self
                        .stack
                        .iter()
                        .map(|&i| self.subsets[i].clone())
                        .collect(),
                };
                self.pop();
                return Some(out);
            }
            let remaining_after = self.l - depth - 1;
            let uncovered = self.n - self.covered;
            let found = (self.cursor[depth]..self.subsets.len()).find(|&idx| {
                if self.used[idx] {
                    return false;
                }
                let fresh = self.subsets[idx]
                    .iter()
                    .filter(|&&j| self.cover[j] == 0)
                    .count();
                uncovered - fresh <= remaining_after * self.m
            });
            match found {
                Some(idx) => {
                    self.cursor[depth] = idx + 1;
                    self.cursor[depth + 1] = 0;
                    self.push(idx);
                }
                None => {
                    if depth == 0 {
                        self.done = true;
                        return None;
                    }
                    self.pop();
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchMode {
    /// Stop at the first candidate that stabilizes every plant.
    #[default]
    FirstFeasible,
    /// Evaluate every candidate; keep the smallest maximum radius.
    BestMargin,
}

#[derive(Debug, Clone)]
pub struct ScheduleOptions {
    pub mode: SearchMode,
    /// Permit searches with more than [`LARGE_SEARCH`] candidates.
    pub allow_large: bool,
    pub tol: f64,
    /// Cap on stored per-candidate diagnostics.
    pub max_diagnostics: usize,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            mode: SearchMode::FirstFeasible,
            allow_large: false,
            tol: ESMS_TOL,
            max_diagnostics: 1000,
        }
    }
}

/// Radii of the plants evaluated for one candidate; `None` where the search
/// abandoned the candidate before reaching that plant.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDiagnostic {
    pub sets: Vec<Vec<usize>>,
    pub radii: Vec<Option<f64>>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleOutcome {
    Schedule {
        schedule: PeriodicSchedule,
        certificates: Vec<CoupledCertificate>,
        radii: Vec<f64>,
    },
    ErrorPeriodTooShort {
        lmin: usize,
    },
    NoStabilizingSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleVerdict {
    pub outcome: ScheduleOutcome,
    pub diagnostics: Vec<CandidateDiagnostic>,
    pub candidates_examined: usize,
    pub diagnostics_truncated: bool,
}

impl ScheduleVerdict {
    pub fn schedule(&self) -> Option<&PeriodicSchedule> {
        match &self.outcome {
            ScheduleOutcome::Schedule { schedule, .. } => Some(schedule),
            _ => None,
        }
    }

    /// Schedule JSON for a successful outcome.
    pub fn to_json_value(&self) -> Option<serde_json::Value> {
        match &self.outcome {
            ScheduleOutcome::Schedule {
                schedule,
                certificates,
                radii,
            } => Some(schedule_json(schedule, certificates, radii)),
            _ => None,
        }
    }
}

/// Per-plant radius lookup keyed by slot membership.
struct RadiusTable {
    modes: Vec<ModePair>,
    p: f64,
    cache: Vec<HashMap<Vec<bool>, f64>>,
}

impl RadiusTable {
    fn new(modes: Vec<ModePair>, p: f64, l: usize) -> Result<Self> {
        let mut cache = vec![HashMap::new(); modes.len()];
        if (1usize << l.min(usize::BITS as usize - 1)) <= PRECOMPUTE_MASKS {
            let jobs: Vec<(usize, Vec<bool>)> = (0..modes.len())
                .flat_map(|i| (1u64..(1u64 << l)).map(move |mask| (i, mask_bits(mask, l))))
                .collect();
            let radii: Vec<Result<f64>> = jobs
                .par_iter()
                .map(|(i, member)| {
                    is_esms_for_membership(&modes[*i], member, p, 0.0)
                        .map(|r| r.radius)
                        .map_err(|e| annotate(e, *i + 1, member))
                })
                .collect();
            for ((i, member), r) in jobs.into_iter().zip(radii) {
                cache[i].insert(member, r?);
            }
        }
        Ok(RadiusTable { modes, p, cache })
    }

    fn radius(&mut self, plant_idx: usize, member: &[bool]) -> Result<f64> {
        if let Some(&r) = self.cache[plant_idx].get(member) {
            return Ok(r);
        }
        let r = is_esms_for_membership(&self.modes[plant_idx], member, self.p, 0.0)
            .map_err(|e| annotate(e, plant_idx + 1, member))?
            .radius;
        self.cache[plant_idx].insert(member.to_vec(), r);
        Ok(r)
    }
}

fn mask_bits(mask: u64, l: usize) -> Vec<bool> {
    (0..l).map(|q| mask >> q & 1 == 1).collect()
}

fn annotate(e: Error, plant: usize, member: &[bool]) -> Error {
    let slots: Vec<usize> = member
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(q, _)| q + 1)
        .collect();
    match e {
        Error::Numerical { message, condition } => Error::Numerical {
            message: format!("plant {plant} scheduled in slots {slots:?}: {message}"),
            condition,
        },
        other => other,
    }
}

/// Finds a stabilizing periodic schedule of period `l` for plants that all
/// carry gains.
pub fn design_schedule(
    plants: &[Plant],
    network: &NetworkConfig,
    l: usize,
    opts: &ScheduleOptions,
) -> Result<ScheduleVerdict> {
    let n = plants.len();
    network.check_plants(n)?;
    let modes = plants
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.mode_pair()
                .map_err(|e| Error::invalid(format!("plant {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = network.capacity();
    let p = network.loss_probability();
    let lm = lmin(n, m)?;
    if l < lm {
        return Ok(ScheduleVerdict {
            outcome: ScheduleOutcome::ErrorPeriodTooShort { lmin: lm },
            diagnostics: Vec::new(),
            candidates_examined: 0,
            diagnostics_truncated: false,
        });
    }
    let count = gamma_count(n, m, l);
    if !opts.allow_large && count.is_none_or(|c| c > LARGE_SEARCH) {
        let shown = count.map_or_else(|| "more than 2^128".to_string(), |c| c.to_string());
        return Err(Error::Capacity(format!(
            "period {l} yields {shown} candidate schedules (limit {LARGE_SEARCH}); pass the large-search override to proceed"
        )));
    }

    let mut table = RadiusTable::new(modes.clone(), p, l)?;
    let mut verdict = ScheduleVerdict {
        outcome: ScheduleOutcome::NoStabilizingSchedule,
        diagnostics: Vec::new(),
        candidates_examined: 0,
        diagnostics_truncated: false,
    };
    let mut ranked: Vec<(f64, usize, GammaCandidate, Vec<f64>)> = Vec::new();

    for cand in enumerate_gamma(n, m, l)? {
        verdict.candidates_examined += 1;
        let mut radii = vec![None; n];
        let mut feasible = true;
        for (i, slot) in radii.iter_mut().enumerate() {
            let r = table.radius(i, &cand.membership(i + 1))?;
            *slot = Some(r);
            if r.is_nan() || r >= 1.0 - opts.tol {
                feasible = false;
                if opts.mode == SearchMode::FirstFeasible {
                    break;
                }
            }
        }
        if !feasible {
            push_diag(&mut verdict, opts, &cand, radii, None);
            continue;
        }
        let radii: Vec<f64> = radii.into_iter().map(|r| r.unwrap_or(f64::NAN)).collect();
        match opts.mode {
            SearchMode::FirstFeasible => match certify(&modes, &cand, p, &radii, n, m) {
                Ok(outcome) => {
                    verdict.outcome = outcome;
                    return Ok(verdict);
                }
                Err(e) => {
                    let radii = radii.into_iter().map(Some).collect();
                    push_diag(&mut verdict, opts, &cand, radii, Some(e.to_string()));
                }
            },
            SearchMode::BestMargin => {
                let worst = radii.iter().copied().fold(0.0, f64::max);
                ranked.push((worst, ranked.len(), cand, radii));
            }
        }
    }

    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, _, cand, radii) in ranked {
        match certify(&modes, &cand, p, &radii, n, m) {
            Ok(outcome) => {
                verdict.outcome = outcome;
                return Ok(verdict);
            }
            Err(e) => {
                let radii = radii.into_iter().map(Some).collect();
                push_diag(&mut verdict, opts, &cand, radii, Some(e.to_string()));
            }
        }
    }
    Ok(verdict)
}

fn push_diag(
    verdict: &mut ScheduleVerdict,
    opts: &ScheduleOptions,
    cand: &GammaCandidate,
    radii: Vec<Option<f64>>,
    note: Option<String>,
) {
    if verdict.diagnostics.len() < opts.max_diagnostics {
        verdict.diagnostics.push(CandidateDiagnostic {
            sets: cand.sets.clone(),
            radii,
            note,
        });
    } else {
        verdict.diagnostics_truncated = true;
    }
}

fn certify(
    modes: &[ModePair],
    cand: &GammaCandidate,
    p: f64,
    radii: &[f64],
    n: usize,
    m: usize,
) -> Result<ScheduleOutcome> {
    let certificates = modes
        .iter()
        .enumerate()
        .map(|(i, mp)| {
            let cert = solve_certificate_for_membership(mp, &cand.membership(i + 1), p, i + 1)?;
            if !cert.is_valid() {
                return Err(Error::numerical(format!(
                    "plant {}: certificate failed verification",
                    i + 1
                )));
            }
            Ok(cert)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScheduleOutcome::Schedule {
        schedule: cand.to_schedule(n, m)?,
        certificates,
        radii: radii.to_vec(),
    })
}

pub fn schedule_json(
    schedule: &PeriodicSchedule,
    certificates: &[CoupledCertificate],
    radii: &[f64],
) -> serde_json::Value {
    serde_json::json!({
        "period": schedule.period(),
        "slots": schedule.slots(),
        "certificates": certificates.iter().map(|c| c.to_json_value()).collect::<Vec<_>>(),
        "radii": radii,
    })
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    period: usize,
    slots: Vec<Vec<usize>>,
    #[serde(default)]
    certificates: Option<serde_json::Value>,
    #[serde(default)]
    radii: Option<Vec<f64>>,
}

/// Reads the slots of a schedule JSON file.
pub fn parse_schedule_json(
    text: &str,
    n_plants: usize,
    capacity: usize,
) -> Result<PeriodicSchedule> {
    let file: ScheduleFile = serde_json::from_str(text)
        .map_err(|e| Error::invalid(format!("malformed schedule: {e}")))?;
    if file.period != file.slots.len() {
        return Err(Error::invalid(format!(
            "schedule period {} does not match its {} slots",
            file.period,
            file.slots.len()
        )));
    }
    schedule_from_sets(&file.slots, n_plants, capacity)
}

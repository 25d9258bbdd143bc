//! Plants, the shared network, periodic schedules and the per-plant Markov view.
//!
//! Plant ids are 1-based everywhere a schedule or a transition matrix refers
//! to them; slot indices in a [`PeriodicSchedule`] are 0-based positions in
//! time, so slot `q - 1` holds the set usually written `D_q`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;

/// Operating mode of a plant during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Control packet delivered: closed loop `A + BK`.
    Stable = 0,
    /// No access or packet lost: open loop `A`.
    Unstable = 1,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Stable, Mode::Unstable];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A linear plant `x⁺ = A x + B u` with optional static feedback `u = K x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    k: Option<DMatrix<f64>>,
}

impl Plant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, k: Option<DMatrix<f64>>) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::invalid(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != d || b.ncols() == 0 {
            return Err(Error::invalid(format!(
                "B must be {d}xm with m ≥ 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if let Some(k) = &k {
            if k.nrows() != b.ncols() || k.ncols() != d {
                return Err(Error::invalid(format!(
                    "K must be {}x{d}, got {}x{}",
                    b.ncols(),
                    k.nrows(),
                    k.ncols()
                )));
            }
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&a) || !finite(&b) || !k.as_ref().is_none_or(finite) {
            return Err(Error::invalid("plant matrices have non-finite entries"));
        }
        Ok(Plant { a, b, k })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn k(&self) -> Option<&DMatrix<f64>> {
        self.k.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Same plant with `k` as its gain.
    pub fn with_gain(&self, k: DMatrix<f64>) -> Result<Plant> {
        Plant::new(self.a.clone(), self.b.clone(), Some(k))
    }

    pub fn without_gain(&self) -> Plant {
        Plant {
            a: self.a.clone(),
            b: self.b.clone(),
            k: None,
        }
    }

    pub fn mode_pair(&self) -> Result<ModePair> {
        let k = self
            .k
            .as_ref()
            .ok_or_else(|| Error::invalid("plant has no feedback gain K"))?;
        Ok(ModePair {
            stable: &self.a + &self.b * k,
            unstable: self.a.clone(),
        })
    }

    /// Warning-grade findings: a stable open loop, or a gain that does not
    /// stabilize the closed loop.
    pub fn diagnostics(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let open = spectral_radius(&self.a)?;
        if open < 1.0 {
            out.push(format!(
                "open-loop matrix A is already stable (spectral radius {open:.6})"
            ));
        }
        if let Some(k) = &self.k {
            let closed = spectral_radius(&(&self.a + &self.b * k))?;
            if closed >= 1.0 {
                out.push(format!(
                    "closed loop A + BK is not stable (spectral radius {closed:.6})"
                ));
            }
        }
        Ok(out)
    }
}

/// The two dynamics matrices a plant switches between.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePair {
    stable: DMatrix<f64>,
    unstable: DMatrix<f64>,
}

impl ModePair {
    /// Builds a pair directly from `A_s` and `A_u`.
    pub fn from_matrices(stable: DMatrix<f64>, unstable: DMatrix<f64>) -> Result<Self> {
        let d = stable.nrows();
        if d == 0 || stable.ncols() != d || unstable.shape() != (d, d) {
            return Err(Error::invalid(
                "mode matrices must be square with equal size",
            ));
        }
        Ok(ModePair { stable, unstable })
    }

    pub fn scalar(a_s: f64, a_u: f64) -> Self {
        ModePair {
            stable: DMatrix::from_element(1, 1, a_s),
            unstable: DMatrix::from_element(1, 1, a_u),
        }
    }

    pub fn stable(&self) -> &DMatrix<f64> {
        &self.stable
    }

    pub fn unstable(&self) -> &DMatrix<f64> {
        &self.unstable
    }

    pub fn get(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::Stable => &self.stable,
            Mode::Unstable => &self.unstable,
        }
    }

    pub fn dim(&self) -> usize {
        self.stable.nrows()
    }
}

/// Channel count `M` and per-channel loss probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    capacity: usize,
    loss_probability: f64,
}

impl NetworkConfig {
    pub fn new(capacity: usize, loss_probability: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("network capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&loss_probability) {
            return Err(Error::invalid(format!(
                "loss probability must lie in [0, 1], got {loss_probability}"
            )));
        }
        Ok(NetworkConfig {
            capacity,
            loss_probability,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn loss_probability(&self) -> f64 {
        self.loss_probability
    }

    /// Checks `0 < M < N`.
    pub fn check_plants(&self, n_plants: usize) -> Result<()> {
        if self.capacity >= n_plants {
            return Err(Error::invalid(format!(
                "capacity {} must be smaller than the number of plants {n_plants}",
                self.capacity
            )));
        }
        Ok(())
    }
}

/// `⌈N/M⌉`: the shortest period that can give every plant a slot.
pub fn lmin(n: usize, m: usize) -> Result<usize> {
    if m == 0 || m >= n {
        return Err(Error::invalid(format!(
            "lmin needs 0 < M < N, got N={n}, M={m}"
        )));
    }
    Ok(n.div_ceil(m))
}

/// A periodic scheduling sequence `γ(t) = slots[t mod ℓ]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodicSchedule {
    n_plants: usize,
    slots: Vec<Vec<usize>>,
    covering: bool,
    distinct: bool,
}

impl PeriodicSchedule {
    pub fn period(&self) -> usize {
        self.slots.len()
    }

    pub fn n_plants(&self) -> usize {
        self.n_plants
    }

    pub fn slots(&self) -> &[Vec<usize>] {
        &self.slots
    }

    /// Every plant appears in some slot.
    pub fn is_covering(&self) -> bool {
        self.covering
    }

    /// No two slots hold the same set.
    pub fn is_distinct(&self) -> bool {
        self.distinct
    }

    pub fn require_covering_distinct(&self) -> Result<()> {
        if !self.covering {
            return Err(Error::invalid("schedule does not cover every plant"));
        }
        if !self.distinct {
            return Err(Error::invalid("schedule slots are not pairwise distinct"));
        }
        Ok(())
    }

    pub fn gamma(&self, t: usize) -> &[usize] {
        &self.slots[t % self.slots.len()]
    }

    pub fn is_scheduled(&self, plant: usize, t: usize) -> bool {
        self.gamma(t).contains(&plant)
    }

    /// Channel carrying `plant` at time `t`: its position within the slot.
    pub fn channel_of(&self, plant: usize, t: usize) -> Option<usize> {
        self.gamma(t).iter().position(|&j| j == plant)
    }

    /// `membership[q] = plant ∈ slots[q]`.
    pub fn membership(&self, plant: usize) -> Result<Vec<bool>> {
        self.check_plant(plant)?;
        Ok(self.slots.iter().map(|s| s.contains(&plant)).collect())
    }

    pub fn check_plant(&self, plant: usize) -> Result<()> {
        if plant == 0 || plant > self.n_plants {
            return Err(Error::invalid(format!(
                "plant id {plant} out of range 1..={}",
                self.n_plants
            )));
        }
        Ok(())
    }
}

/// Builds a schedule over plants `1..=n_plants` whose slots each hold
/// `capacity` distinct ids. Slot order and member order are kept as given.
pub fn schedule_from_sets(
    sets: &[Vec<usize>],
    n_plants: usize,
    capacity: usize,
) -> Result<PeriodicSchedule> {
    if sets.is_empty() {
        return Err(Error::invalid("schedule needs at least one slot"));
    }
    let mut seen_sets: Vec<BTreeSet<usize>> = Vec::with_capacity(sets.len());
    let mut union = BTreeSet::new();
    for (q, set) in sets.iter().enumerate() {
        if set.len() != capacity {
            return Err(Error::invalid(format!(
                "slot {} has {} members, expected {capacity}",
                q + 1,
                set.len()
            )));
        }
        let members: BTreeSet<usize> = set.iter().copied().collect();
        if members.len() != set.len() {
            return Err(Error::invalid(format!("slot {} repeats a plant", q + 1)));
        }
        if let Some(&bad) = members.iter().find(|&&j| j == 0 || j > n_plants) {
            return Err(Error::invalid(format!(
                "slot {} names plant {bad}, outside 1..={n_plants}",
                q + 1
            )));
        }
        union.extend(members.iter().copied());
        seen_sets.push(members);
    }
    let covering = union.len() == n_plants;
    let distinct = (0..seen_sets.len())
        .all(|a| ((a + 1)..seen_sets.len()).all(|b| seen_sets[a] != seen_sets[b]));
    Ok(PeriodicSchedule {
        n_plants,
        slots: sets.to_vec(),
        covering,
        distinct,
    })
}

/// Row-stochastic 2×2 matrix, rows = from (stable, unstable), columns = to.
pub type Transition = [[f64; 2]; 2];

/// Transition matrix governing the step into time `t ≥ 1`.
pub fn transition_matrix(
    plant: usize,
    schedule: &PeriodicSchedule,
    p: f64,
    t: usize,
) -> Result<Transition> {
    schedule.check_plant(plant)?;
    check_probability(p)?;
    if t == 0 {
        return Err(Error::invalid("transition matrices are indexed from t = 1"));
    }
    Ok(if schedule.is_scheduled(plant, t) {
        [[1.0 - p, p], [1.0 - p, p]]
    } else {
        [[0.0, 1.0], [0.0, 1.0]]
    })
}

/// Distribution of the mode at time 0.
pub fn initial_distribution(plant: usize, schedule: &PeriodicSchedule, p: f64) -> Result<[f64; 2]> {
    schedule.check_plant(plant)?;
    check_probability(p)?;
    Ok(if schedule.is_scheduled(plant, 0) {
        [1.0 - p, p]
    } else {
        [0.0, 1.0]
    })
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// One plant's mode process seen as a periodic Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovView {
    pub plant: usize,
    /// `transitions[t - 1]` for `t = 1..=ℓ`.
    pub transitions: Vec<Transition>,
    pub initial: [f64; 2],
}

impl MarkovView {
    pub fn new(plant: usize, schedule: &PeriodicSchedule, p: f64) -> Result<Self> {
        let transitions = (1..=schedule.period())
            .map(|t| transition_matrix(plant, schedule, p, t))
            .collect::<Result<_>>()?;
        Ok(MarkovView {
            plant,
            transitions,
            initial: initial_distribution(plant, schedule, p)?,
        })
    }

    pub fn transition(&self, t: usize) -> &Transition {
        let l = self.transitions.len();
        &self.transitions[(t + l - 1) % l]
    }
}

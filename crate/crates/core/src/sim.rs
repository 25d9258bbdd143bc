//! Seeded Monte Carlo simulation of the switched plants.
//!
//! Each trial owns a ChaCha8 stream selected by `(seed, trial)`, so results
//! do not depend on how trials are spread over threads. Within a trial the
//! draws are: every plant's initial state (plant order, coordinate order),
//! then at each step one loss indicator per channel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Mode, ModePair, PeriodicSchedule, Plant};

/// Squared norm above which a trajectory is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    /// Initial coordinates are uniform on `[−w, w]`.
    pub half_width: f64,
}

impl SimConfig {
    pub fn new(horizon: usize, trials: usize, seed: u64) -> Result<Self> {
        let cfg = SimConfig {
            horizon,
            trials,
            seed,
            half_width: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.trials == 0 {
            return Err(Error::invalid("horizon and trial count must be positive"));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::invalid("initial-state half-width must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    /// `series[i][t]`: mean of `‖x_i(t)‖²` over trials, `t = 0..=T`; `inf`
    /// from the first step at which any trial diverged.
    pub series: Vec<Vec<f64>>,
    /// Fit of each series, `None` when it is degenerate.
    pub fits: Vec<Option<DecayFit>>,
    /// Number of trials in which each plant diverged.
    pub divergent_trials: Vec<usize>,
}

impl TrajectoryStats {
    pub fn diverged(&self, plant_idx: usize) -> bool {
        self.divergent_trials[plant_idx] > 0
    }

    /// `t,plant_1,…` header and one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.series.len() {
            out.push_str(&format!(",plant_{i}"));
        }
        out.push('\n');
        let len = self.series.first().map_or(0, Vec::len);
        for t in 0..len {
            out.push_str(&t.to_string());
            for s in &self.series {
                out.push(',');
                out.push_str(&format_float(s[t]));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let plants: Vec<serde_json::Value> = (0..self.series.len())
            .map(|i| {
                serde_json::json!({
                    "plant": i + 1,
                    "alpha": self.fits[i].map(|f| f.alpha),
                    "beta": self.fits[i].map(|f| f.beta),
                    "diverged": self.diverged(i),
                    "divergent_trials": self.divergent_trials[i],
                })
            })
            .collect();
        serde_json::json!({ "plants": plants })
    }
}

fn format_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        // Debug gives the shortest digits that round-trip.
        format!("{v:?}")
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

struct Trial {
    /// `norms[i][t]`.
    norms: Vec<Vec<f64>>,
    diverged: Vec<bool>,
}

fn run_trial(
    modes: &[ModePair],
    schedule: &PeriodicSchedule,
    channels: usize,
    p: f64,
    cfg: &SimConfig,
    trial: usize,
) -> Trial {
    let mut rng = trial_rng(cfg.seed, trial);
    let w = cfg.half_width;
    let mut states: Vec<DVector<f64>> = modes
        .iter()
        .map(|m| DVector::from_fn(m.dim(), |_, _| rng.random_range(-w..=w)))
        .collect();
    let n = modes.len();
    let mut norms: Vec<Vec<f64>> = states.iter().map(|x| vec![x.norm_squared()]).collect();
    let mut diverged = vec![false; n];
    let mut lost = vec![false; channels];
    for t in 0..cfg.horizon {
        for l in lost.iter_mut() {
            *l = rng.random_bool(p);
        }
        for i in 0..n {
            if diverged[i] {
                norms[i].push(f64::INFINITY);
                continue;
            }
            let mode = mode_at(schedule, i + 1, t, &lost);
            states[i] = modes[i].get(mode) * &states[i];
            let sq = states[i].norm_squared();
            if sq.is_nan() || sq > DIVERGENCE_LIMIT {
                diverged[i] = true;
                norms[i].push(f64::INFINITY);
            } else {
                norms[i].push(sq);
            }
        }
    }
    Trial { norms, diverged }
}

fn mode_at(schedule: &PeriodicSchedule, plant: usize, t: usize, lost: &[bool]) -> Mode {
    match schedule.channel_of(plant, t) {
        Some(c) if !lost[c] => Mode::Stable,
        _ => Mode::Unstable,
    }
}

fn channel_count(schedule: &PeriodicSchedule) -> usize {
    schedule.slots().iter().map(Vec::len).max().unwrap_or(0)
}

/// Monte Carlo estimate of `E‖x_i(t)‖²` for every plant.
pub fn simulate(
    plants: &[Plant],
    schedule: &PeriodicSchedule,
    p: f64,
    cfg: &SimConfig,
) -> Result<TrajectoryStats> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    if plants.len() != schedule.n_plants() {
        return Err(Error::invalid(format!(
            "schedule is for {} plants, got {}",
            schedule.n_plants(),
            plants.len()
        )));
    }
    let modes = plants
        .iter()
        .enumerate()
        .map(|(i, pl)| {
            pl.mode_pair()
                .map_err(|e| Error::invalid(format!("plant {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let channels = channel_count(schedule);
    let trials: Vec<Trial> = (0..cfg.trials)
        .into_par_iter()
        .map(|k| run_trial(&modes, schedule, channels, p, cfg, k))
        .collect();

    let n = plants.len();
    let len = cfg.horizon + 1;
    let mut sums = vec![vec![0.0; len]; n];
    let mut divergent_trials = vec![0; n];
    for trial in &trials {
        for i in 0..n {
            for (acc, v) in sums[i].iter_mut().zip(&trial.norms[i]) {
                *acc += v;
            }
            divergent_trials[i] += usize::from(trial.diverged[i]);
        }
    }
    let count = cfg.trials as f64;
    let series: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|s| s.into_iter().map(|v| v / count).collect())
        .collect();
    let fits = series.iter().map(|s| fit_decay(s).ok()).collect();
    Ok(TrajectoryStats {
        series,
        fits,
        divergent_trials,
    })
}

/// Least-squares fit of `log m(t) ≈ log α − β t`, using samples from `t = 0`
/// up to the first non-finite one. Zeros are clipped to `1e-300`.
pub fn fit_decay(series: &[f64]) -> Result<DecayFit> {
    let finite: Vec<f64> = series
        .iter()
        .copied()
        .take_while(|v| v.is_finite())
        .collect();
    if finite.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("decay fit needs a non-negative series"));
    }
    if finite.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid(
            "decay fit of an all-zero series is degenerate",
        ));
    }
    if finite.len() < 2 {
        return Err(Error::invalid(
            "decay fit needs at least two finite samples",
        ));
    }
    let n = finite.len() as f64;
    let ys: Vec<f64> = finite.iter().map(|&v| v.max(1e-300).ln()).collect();
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in ys.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok(DecayFit {
        alpha: (y_mean - slope * t_mean).exp(),
        beta: -slope,
    })
}

/// Modes `σ_i(t)` for `t = 0..horizon` along trial `trial`, drawn exactly as
/// [`simulate`] draws them.
pub fn sample_modes(
    plants: &[Plant],
    schedule: &PeriodicSchedule,
    p: f64,
    cfg: &SimConfig,
    trial: usize,
) -> Result<Vec<Vec<Mode>>> {
    let mut rng = trial_rng(cfg.seed, trial);
    let w = cfg.half_width;
    for pl in plants {
        for _ in 0..pl.state_dim() {
            let _: f64 = rng.random_range(-w..=w);
        }
    }
    let channels = channel_count(schedule);
    let mut lost = vec![false; channels];
    let mut out = vec![Vec::with_capacity(cfg.horizon); plants.len()];
    for t in 0..cfg.horizon {
        for l in lost.iter_mut() {
            *l = rng.random_bool(p);
        }
        for (i, seq) in out.iter_mut().enumerate() {
            seq.push(mode_at(schedule, i + 1, t, &lost));
        }
    }
    Ok(out)
}

/// `‖A^t x‖²` helper for deterministic checks.
pub fn power_norm_squared(a: &DMatrix<f64>, x: &DVector<f64>, t: usize) -> f64 {
    let mut v = x.clone();
    for _ in 0..t {
        v = a * v;
    }
    v.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{schedule_from_sets, transition_matrix};

    fn scalar(a_s: f64, a_u: f64) -> Plant {
        Plant::new(
            DMatrix::from_element(1, 1, a_u),
            DMatrix::from_element(1, 1, 1.0),
            Some(DMatrix::from_element(1, 1, a_s - a_u)),
        )
        .unwrap()
    }

    #[test]
    fn exact_exponential_fit() {
        let s: Vec<f64> = (0..=20).map(|t| 2.0 * (-0.3 * t as f64).exp()).collect();
        let f = fit_decay(&s).unwrap();
        assert!((f.alpha - 2.0).abs() < 1e-10 && (f.beta - 0.3).abs() < 1e-10);
    }

    #[test]
    fn constant_series_fit() {
        let f = fit_decay(&[3.5; 10]).unwrap();
        assert!((f.alpha - 3.5).abs() < 1e-12 && f.beta.abs() < 1e-12);
    }

    #[test]
    fn degenerate_fits_are_errors() {
        assert!(fit_decay(&[0.0; 5]).is_err());
        assert!(fit_decay(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn fit_stops_at_divergence() {
        let mut s: Vec<f64> = (0..10).map(|t| (-(t as f64)).exp()).collect();
        s.extend([f64::INFINITY, 5.0]);
        assert!((fit_decay(&s).unwrap().beta - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lossless_always_scheduled_plant_is_deterministic() {
        let plant = scalar(0.5, 1.2);
        let s = schedule_from_sets(&[vec![1]], 1, 1).unwrap();
        let cfg = SimConfig::new(30, 16, 7).unwrap();
        let stats = simulate(std::slice::from_ref(&plant), &s, 0.0, &cfg).unwrap();
        let m0 = stats.series[0][0];
        for t in 0..=30 {
            let expected = m0 * 0.25f64.powi(t as i32);
            assert!((stats.series[0][t] - expected).abs() <= 1e-12 * expected.max(1e-300));
        }
        assert!((stats.fits[0].unwrap().beta - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn certain_loss_diverges() {
        let plant = scalar(0.5, 30.0);
        let s = schedule_from_sets(&[vec![1]], 1, 1).unwrap();
        let cfg = SimConfig::new(200, 4, 1).unwrap();
        let stats = simulate(&[plant], &s, 1.0, &cfg).unwrap();
        assert!(stats.diverged(0));
        assert_eq!(stats.divergent_trials[0], 4);
        assert!(stats.series[0][200].is_infinite());
        assert!(stats.series[0][1] > stats.series[0][0]);
    }

    #[test]
    fn csv_layout() {
        let plants = vec![scalar(0.5, 1.2), scalar(0.4, 1.1)];
        let s = schedule_from_sets(&[vec![1], vec![2]], 2, 1).unwrap();
        let cfg = SimConfig::new(5, 3, 9).unwrap();
        let csv = simulate(&plants, &s, 0.3, &cfg).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,plant_1,plant_2");
        assert_eq!(lines.len(), 7);
        for line in &lines[1..] {
            for v in line.split(',').skip(1) {
                let x: f64 = v.parse().unwrap();
                assert_eq!(format_float(x), v);
            }
        }
    }

    #[test]
    fn same_seed_same_output_regardless_of_threads() {
        let plants = vec![scalar(0.5, 1.2), scalar(0.4, 1.1)];
        let s = schedule_from_sets(&[vec![1], vec![2]], 2, 1).unwrap();
        let cfg = SimConfig::new(40, 64, 42).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = single.install(|| simulate(&plants, &s, 0.3, &cfg).unwrap());
        let b = many.install(|| simulate(&plants, &s, 0.3, &cfg).unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        let c = simulate(&plants, &s, 0.3, &SimConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn statistics_do_not_depend_on_trial_order() {
        let plants = vec![scalar(0.5, 1.2), scalar(0.4, 1.1)];
        let s = schedule_from_sets(&[vec![1], vec![2]], 2, 1).unwrap();
        let cfg = SimConfig::new(20, 50, 5).unwrap();
        let modes: Vec<ModePair> = plants.iter().map(|p| p.mode_pair().unwrap()).collect();
        let forward: Vec<Trial> = (0..50)
            .map(|k| run_trial(&modes, &s, 1, 0.3, &cfg, k))
            .collect();
        let reversed: Vec<Trial> = (0..50)
            .rev()
            .map(|k| run_trial(&modes, &s, 1, 0.3, &cfg, k))
            .collect();
        let mean = |ts: &[Trial], i: usize, t: usize| {
            ts.iter().map(|tr| tr.norms[i][t]).sum::<f64>() / 50.0
        };
        let stats = simulate(&plants, &s, 0.3, &cfg).unwrap();
        for i in 0..2 {
            for t in 0..=20 {
                let (f, r) = (mean(&forward, i, t), mean(&reversed, i, t));
                assert!((f - r).abs() <= 1e-12 * f.abs().max(1e-300));
                assert_eq!(stats.series[i][t], f);
            }
        }
    }

    #[test]
    fn mode_frequencies_match_transition_rows() {
        let plants = vec![scalar(0.5, 1.2), scalar(0.4, 1.1), scalar(0.3, 1.05)];
        let s = schedule_from_sets(&[vec![1, 2], vec![3, 1]], 3, 2).unwrap();
        let p = 0.3;
        let cfg = SimConfig::new(4000, 1, 11).unwrap();
        let modes = sample_modes(&plants, &s, p, &cfg, 0).unwrap();
        for (i, seq) in modes.iter().enumerate() {
            // counts[from][to] split by whether the step is scheduled
            let mut sched = [[0usize; 2]; 2];
            let mut unsched = [[0usize; 2]; 2];
            for t in 1..seq.len() {
                let (from, to) = (seq[t - 1].index(), seq[t].index());
                let pi = transition_matrix(i + 1, &s, p, t).unwrap();
                if pi[0][0] > 0.0 {
                    sched[from][to] += 1;
                } else {
                    unsched[from][to] += 1;
                }
            }
            for row in 0..2 {
                let total = sched[row][0] + sched[row][1];
                if total > 0 {
                    let freq = sched[row][1] as f64 / total as f64;
                    let se = (p * (1.0 - p) / total as f64).sqrt();
                    assert!(
                        (freq - p).abs() <= 3.0 * se,
                        "plant {} row {row}: {freq}",
                        i + 1
                    );
                }
                assert_eq!(unsched[row][0], 0);
            }
        }
    }

    #[test]
    fn helper_power_norm() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let x = DVector::from_element(1, 2.0);
        assert!((power_norm_squared(&a, &x, 3) - 4.0 / 64.0).abs() < 1e-15);
    }
}

use nalgebra::DMatrix;
use ncsched::lyapunov::{certificate_feasibility, is_esms_for_membership, ESMS_TOL};
use ncsched::model::{ModePair, NetworkConfig, Plant};
use ncsched::synth_schedule::{design_schedule, ScheduleOptions, ScheduleOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Case {
    modes: ModePair,
    membership: Vec<bool>,
    p: f64,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=2);
    let l = rng.random_range(1..=3);
    let p = [0.0, 0.25, 0.5][rng.random_range(0..3)];
    let shrink = rng.random_range(0.3..1.0);
    let stable = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0) * shrink);
    let unstable = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.5..1.5));
    let mut membership: Vec<bool> = (0..l).map(|_| rng.random_bool(0.5)).collect();
    if !membership.iter().any(|&b| b) {
        membership[rng.random_range(0..l)] = true;
    }
    Case {
        modes: ModePair::from_matrices(stable, unstable).unwrap(),
        membership,
        p,
    }
}

#[test]
fn monodromy_and_projection_decisions_agree() {
    let cases: Vec<(f64, Case)> = (0..400u64)
        .map(random_case)
        .map(|c| {
            let r = is_esms_for_membership(&c.modes, &c.membership, c.p, ESMS_TOL)
                .unwrap()
                .radius;
            (r, c)
        })
        .filter(|(r, _)| (r - 1.0).abs() > 0.05)
        .take(200)
        .collect();
    assert_eq!(cases.len(), 200);
    let disagreements: Vec<String> = cases
        .par_iter()
        .filter_map(|(r, c)| {
            let lmi = certificate_feasibility(&c.modes, &c.membership, c.p, 20_000).unwrap();
            (lmi.is_feasible() != (*r < 1.0))
                .then(|| format!("radius {r}, membership {:?}, p {}", c.membership, c.p))
        })
        .collect();
    assert!(disagreements.is_empty(), "{disagreements:#?}");
}

fn scalar_radius(a_s: f64, a_u: f64, membership: &[bool], p: f64) -> f64 {
    // Pair (x_s, x_u) evolves backwards through one period; compose the 2×2 steps.
    let l = membership.len();
    let mut m = DMatrix::<f64>::identity(2, 2);
    for tau in 1..=l {
        let held = membership[tau % l];
        let step = if held {
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    (1.0 - p) * a_s * a_s,
                    p * a_s * a_s,
                    (1.0 - p) * a_u * a_u,
                    p * a_u * a_u,
                ],
            )
        } else {
            DMatrix::from_row_slice(2, 2, &[0.0, a_s * a_s, 0.0, a_u * a_u])
        };
        m *= step;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn all_tuples(n: usize, l: usize) -> Vec<Vec<Vec<usize>>> {
    // Every ordered ℓ-tuple of singletons, then filtered to covering and distinct.
    let mut out = Vec::new();
    let total = n.pow(l as u32);
    for code in 0..total {
        let mut c = code;
        let tuple: Vec<Vec<usize>> = (0..l)
            .map(|_| {
                let v = c % n + 1;
                c /= n;
                vec![v]
            })
            .collect();
        let distinct = (0..l).all(|a| (a + 1..l).all(|b| tuple[a] != tuple[b]));
        let covers = (1..=n).all(|j| tuple.iter().any(|s| s[0] == j));
        if distinct && covers {
            out.push(tuple);
        }
    }
    out
}

#[test]
fn no_schedule_verdict_iff_every_candidate_has_an_unstable_plant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut seen = [0usize; 2];
    for _ in 0..300 {
        let n = rng.random_range(2..=3);
        let l = rng.random_range(n..=3);
        let p = [0.1, 0.3, 0.5][rng.random_range(0..3)];
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(-0.9..0.9), rng.random_range(1.0..2.0)))
            .collect();
        let plants: Vec<Plant> = pairs
            .iter()
            .map(|&(s, u)| {
                Plant::new(
                    DMatrix::from_element(1, 1, u),
                    DMatrix::from_element(1, 1, 1.0),
                    Some(DMatrix::from_element(1, 1, s - u)),
                )
                .unwrap()
            })
            .collect();
        let net = NetworkConfig::new(1, p).unwrap();
        let verdict = design_schedule(&plants, &net, l, &ScheduleOptions::default()).unwrap();
        let some_candidate_works = all_tuples(n, l).iter().any(|tuple| {
            pairs.iter().enumerate().all(|(i, &(s, u))| {
                let member: Vec<bool> = tuple.iter().map(|set| set.contains(&(i + 1))).collect();
                scalar_radius(s, u, &member, p) < 1.0 - ESMS_TOL
            })
        });
        let none = verdict.outcome == ScheduleOutcome::NoStabilizingSchedule;
        assert_eq!(
            none, !some_candidate_works,
            "pairs {pairs:?}, ℓ = {l}, p = {p}"
        );
        seen[usize::from(none)] += 1;
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

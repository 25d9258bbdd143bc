#![allow(clippy::needless_range_loop)]

use nalgebra::DMatrix;
use ncsched::lmi::quadratic_form;
use ncsched::lyapunov::verify_for_membership;
use ncsched::model::{ModePair, NetworkConfig, Plant};
use ncsched::sim::{simulate, SimConfig};
use ncsched::synth_controller::extract_gain;
use ncsched::synth_schedule::{design_schedule, ScheduleOptions, ScheduleOutcome};
use ncsched::SymMat;

fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        rows.len(),
        rows[0].len(),
        rows.iter().flat_map(|r| r.iter().copied()),
    )
}

fn sym(a: f64, b: f64, c: f64) -> SymMat {
    SymMat::new(mat(&[&[a, b], &[b, c]])).unwrap()
}

fn plants() -> Vec<Plant> {
    let b = mat(&[&[0.0], &[1.0]]);
    vec![
        Plant::new(
            mat(&[&[0.65, 0.2], &[-0.1, 1.1]]),
            b.clone(),
            Some(mat(&[&[0.1, -1.1]])),
        )
        .unwrap(),
        Plant::new(
            mat(&[&[0.7, 0.1], &[-0.2, 1.1]]),
            b,
            Some(mat(&[&[0.2, -1.1]])),
        )
        .unwrap(),
    ]
}

// Plant 1 holds slot 2 and plant 2 holds slot 1.
const MEMBERSHIP: [[bool; 2]; 2] = [[false, true], [true, false]];

/// `p[i][τ][k]` reference certificates.
fn reference_p() -> [[[SymMat; 2]; 2]; 2] {
    [
        [
            [
                sym(891.90358, 74.12886, 673.79367),
                sym(749.2162, -253.33635, 2245.0484),
            ],
            [
                sym(797.2495, -5.9026364, 394.41295),
                sym(815.56198, -375.29485, 2929.1336),
            ],
        ],
        [
            [
                sym(1116.1217, -11.624074, 294.60972),
                sym(1241.0856, -537.21264, 2134.3708),
            ],
            [
                sym(1225.6192, 61.169859, 806.16873),
                sym(1140.0419, -378.54181, 1626.5343),
            ],
        ],
    ]
}

/// Reference residuals, including one off-diagonal pair that differs.
fn reference_q() -> [[[[f64; 4]; 2]; 2]; 2] {
    [
        [
            [
                [551.19716, -30.703886, -30.703886, 641.53744],
                [367.11421, -42.907906, -42.907906, 285.90995],
            ],
            [
                [480.70565, -103.30074, -103.30074, 364.44431],
                [443.63392, -49.668868, -49.668868, 294.12439],
            ],
        ],
        [
            [
                [557.50121, -91.427005, -91.427005, 283.2093],
                [511.41201, 24.728926, 24.728326, 238.14305],
            ],
            [
                [648.10341, -21.332397, -21.332397, 794.3827],
                [437.10932, 11.95756, 11.95756, 205.5871],
            ],
        ],
    ]
}

#[test]
fn reference_certificates_reproduce_reference_residuals() {
    let p = reference_p();
    let q = reference_q();
    for (i, plant) in plants().iter().enumerate() {
        let modes = plant.mode_pair().unwrap();
        let ps: Vec<[SymMat; 2]> = p[i].to_vec();
        let rep = verify_for_membership(&modes, &MEMBERSHIP[i], 0.5, &ps).unwrap();
        assert!(rep.valid && rep.margin > 0.0);
        for tau in 0..2 {
            for k in 0..2 {
                let got = rep.q[tau][k].matrix();
                let want = q[i][tau][k];
                for (idx, w) in want.iter().enumerate() {
                    let g = got[(idx / 2, idx % 2)];
                    assert!(
                        (g - w).abs() <= 1.0,
                        "plant {} τ={} k={k}: {g} vs {w}",
                        i + 1,
                        tau + 1
                    );
                }
            }
        }
    }
}

#[test]
fn reference_y_matrices_give_reference_gains() {
    let p = reference_p();
    let k1 = extract_gain(&mat(&[&[0.0001048, -0.0027874]]), &p[0][1][0]).unwrap();
    let k2 = extract_gain(&mat(&[&[0.0001404, -0.0037282]]), &p[1][0][0]).unwrap();
    for (k, want) in [(k1, [0.1, -1.1]), (k2, [0.2, -1.1])] {
        for j in 0..2 {
            assert!((k[(0, j)] - want[j]).abs() <= 1e-3, "{k} vs {want:?}");
        }
    }
}

#[test]
fn stage_two_residual_matches_reference_matrix() {
    let p = reference_p();
    let a1 = mat(&[&[0.65, 0.2], &[-0.1, 1.1]]);
    let b = mat(&[&[0.0], &[1.0]]);
    let y1 = mat(&[&[0.0001048, -0.0027874]]);
    let target = &p[0][1][0];
    let g = &a1 * target.inverse().unwrap().matrix() + &b * &y1;
    let r = quadratic_form(&g, &p[0][0][1], target).unwrap();
    let want = [[-0.0007517, 0.0003], [0.0003, -0.0023336]];
    for i in 0..2 {
        for j in 0..2 {
            let got = r.matrix()[(i, j)];
            assert!(
                (got - want[i][j]).abs() <= 0.05 * want[i][j].abs(),
                "({i},{j}): {got}"
            );
        }
    }
}

#[test]
fn schedule_design_finds_first_candidate() {
    let net = NetworkConfig::new(1, 0.5).unwrap();
    let verdict = design_schedule(&plants(), &net, 2, &ScheduleOptions::default()).unwrap();
    let ScheduleOutcome::Schedule {
        schedule,
        certificates,
        radii,
    } = verdict.outcome
    else {
        panic!("expected a schedule");
    };
    assert_eq!(schedule.slots(), &[vec![1], vec![2]]);
    assert!(radii.iter().all(|&r| r < 1.0));
    assert!(certificates.iter().all(|c| c.is_valid() && c.margin > 0.0));
    let short = design_schedule(&plants(), &net, 1, &ScheduleOptions::default()).unwrap();
    assert_eq!(
        short.outcome,
        ScheduleOutcome::ErrorPeriodTooShort { lmin: 2 }
    );
}

#[test]
fn closed_loops_are_stable_and_open_loops_are_not() {
    for plant in plants() {
        let modes: ModePair = plant.mode_pair().unwrap();
        assert!(ncsched::linalg::spectral_radius(modes.stable()).unwrap() < 1.0);
        assert!(ncsched::linalg::spectral_radius(modes.unstable()).unwrap() > 1.0);
    }
}

#[test]
fn monte_carlo_second_moment_decays() {
    let net = NetworkConfig::new(1, 0.5).unwrap();
    let verdict = design_schedule(&plants(), &net, 2, &ScheduleOptions::default()).unwrap();
    let schedule = verdict.schedule().unwrap();
    let cfg = SimConfig::new(50, 100, 42).unwrap();
    let stats = simulate(&plants(), schedule, 0.5, &cfg).unwrap();
    for i in 0..2 {
        assert!(!stats.diverged(i));
        assert!(stats.fits[i].unwrap().beta > 0.0);
        assert!(stats.series[i][50] < 1e-2 * stats.series[i][0]);
    }
    assert_eq!(
        stats.to_csv(),
        simulate(&plants(), schedule, 0.5, &cfg).unwrap().to_csv()
    );
}

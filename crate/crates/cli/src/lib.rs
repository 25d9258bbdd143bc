//! Command-line front end: instance analysis, schedule and controller
//! synthesis, Monte Carlo simulation, instance generation and timing runs.
//!
//! Exit codes: 0 success, 1 infeasibility or failure verdict, 2 input error,
//! 3 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use ncsched::linalg::spectral_radius;
use ncsched::lyapunov::{is_esms, solve_certificate, ESMS_TOL};
use ncsched::model::lmin;
use ncsched::riccati::lqr;
use ncsched::sim::{simulate, SimConfig};
use ncsched::synth_controller::{design_controllers, ControllerOptions, GainOutcome, GainRecovery};
use ncsched::synth_schedule::{
    design_schedule, parse_schedule_json, ScheduleOptions, ScheduleOutcome, SearchMode,
};
use ncsched::{Error, Instance, NetworkConfig, PeriodicSchedule, Plant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERDICT: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Draw cap for the random instance generator.
pub const GEN_MAX_DRAWS: usize = 10_000;

#[derive(Debug, Parser)]
#[command(
    name = "ncsched",
    version,
    about = "Periodic scheduling for networked control systems over lossy channels"
)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check second-moment stability of each plant under a given schedule.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Analyze only this plant (1-based).
        #[arg(long)]
        plant: Option<usize>,
    },
    /// Search for a stabilizing periodic schedule.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        period: usize,
        /// Evaluate every candidate and keep the one with the smallest maximum radius.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        common: SearchArgs,
    },
    /// Design state-feedback gains, then validate them with a schedule search.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        period: usize,
        #[arg(long, value_enum, default_value_t = RecoveryArg::Verbatim)]
        gain_recovery: RecoveryArg,
        #[command(flatten)]
        common: SearchArgs,
    },
    /// Monte Carlo estimate of the mean squared state norm.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fit and divergence summary as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Generate a random instance with LQR gains.
    Gen {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time schedule searches on generated instances.
    Bench {
        /// Plant counts, comma separated.
        #[arg(long = "plants", value_delimiter = ',', num_args = 0..)]
        plants: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        capacity: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        inputs: usize,
        #[arg(long, default_value_t = 0.5)]
        loss: f64,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Period to search; the minimum feasible period when absent.
        #[arg(long)]
        period: Option<usize>,
        #[arg(long, default_value_t = 5.0)]
        state_cost: f64,
        #[arg(long, default_value_t = 1.0)]
        input_cost: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Permit candidate counts above the default guard.
    #[arg(long)]
    allow_large: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    plants: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    inputs: usize,
    #[arg(long, default_value_t = 1)]
    capacity: usize,
    #[arg(long, default_value_t = 0.5)]
    loss: f64,
    #[arg(long, default_value_t = 5.0)]
    state_cost: f64,
    #[arg(long, default_value_t = 1.0)]
    input_cost: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RecoveryArg {
    Verbatim,
    Averaged,
}

/// Failure of a command: exit code plus the stderr message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn verdict(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VERDICT,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::Capacity(_) => EXIT_INPUT,
            Error::Numerical { .. } => EXIT_NUMERICAL,
            Error::Infeasible(_) => EXIT_VERDICT,
        };
        Failure {
            code,
            message: format!("Error: {e}"),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                EXIT_INPUT
            } else {
                let _ = write!(stdout, "{}", e.render());
                EXIT_OK
            };
            return code;
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(stderr, "Error: --threads must be positive");
        return EXIT_INPUT;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            let _ = writeln!(stderr, "Error: cannot start worker threads: {e}");
            return EXIT_NUMERICAL;
        }
    };
    let (result, out, err) = pool.install(|| {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let result = dispatch(cli.command, &mut out, &mut err);
        (result, out, err)
    });
    let _ = stdout.write_all(&out);
    let _ = stderr.write_all(&err);
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "{}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    match command {
        Command::Analyze {
            config,
            schedule,
            plant,
        } => analyze(&config, &schedule, plant, stdout),
        Command::Schedule {
            config,
            period,
            all,
            common,
        } => schedule(&config, period, all, &common, stdout, stderr),
        Command::Synth {
            config,
            period,
            gain_recovery,
            common,
        } => synth(&config, period, gain_recovery, &common, stdout, stderr),
        Command::Simulate {
            config,
            schedule,
            trials,
            horizon,
            seed,
            out,
            summary,
        } => {
            let inst = load_instance(&config)?;
            let sched = load_schedule(&schedule, &inst)?;
            let cfg = SimConfig::new(horizon, trials, seed)?;
            let stats = simulate(&inst.plants, &sched, inst.network.loss_probability(), &cfg)?;
            emit(out.as_deref(), &stats.to_csv(), stdout)?;
            if let Some(path) = summary {
                write_file(&path, &pretty(&stats.summary_json()))?;
            }
            for i in (0..inst.n_plants()).filter(|&i| stats.diverged(i)) {
                let _ = writeln!(
                    stderr,
                    "plant {} diverged in {} trials",
                    i + 1,
                    stats.divergent_trials[i]
                );
            }
            Ok(())
        }
        Command::Gen { gen, seed, out } => {
            let inst = gen_instance(&gen, seed)?;
            emit(out.as_deref(), &(inst.to_json() + "\n"), stdout)
        }
        Command::Bench {
            plants,
            capacity,
            dim,
            inputs,
            loss,
            repeats,
            seed,
            period,
            state_cost,
            input_cost,
            out,
        } => {
            let mut csv = String::from("N,M,d,p,l,seconds\n");
            for (row_seed, &n) in (seed..).step_by(repeats.max(1)).zip(&plants) {
                let gen = GenArgs {
                    plants: n,
                    dim,
                    inputs,
                    capacity,
                    loss,
                    state_cost,
                    input_cost,
                };
                let l = match period {
                    Some(l) => l,
                    None => lmin(n, capacity)?,
                };
                for r in 0..repeats {
                    let inst = gen_instance(&gen, row_seed.wrapping_add(r as u64))?;
                    let start = Instant::now();
                    design_schedule(&inst.plants, &inst.network, l, &ScheduleOptions::default())?;
                    let secs = start.elapsed().as_secs_f64();
                    csv.push_str(&format!("{n},{capacity},{dim},{loss},{l},{secs}\n"));
                }
            }
            emit(out.as_deref(), &csv, stdout)
        }
    }
}

fn read_file(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("Error: cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .map_err(|e| Failure::input(format!("Error: cannot write {}: {e}", path.display())))
}

fn emit(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> CmdResult {
    match path {
        Some(p) => write_file(p, text),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Failure::input(format!("Error: cannot write output: {e}"))),
    }
}

fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("JSON values always serialize") + "\n"
}

fn load_instance(path: &Path) -> std::result::Result<Instance, Failure> {
    Instance::from_json(&read_file(path)?)
        .map_err(|e| Failure::input(format!("Error: {}: {e}", path.display())))
}

fn load_schedule(path: &Path, inst: &Instance) -> std::result::Result<PeriodicSchedule, Failure> {
    parse_schedule_json(&read_file(path)?, inst.n_plants(), inst.network.capacity())
        .map_err(|e| Failure::input(format!("Error: {}: {e}", path.display())))
}

fn require_gains(inst: &Instance) -> CmdResult {
    match inst.plants.iter().position(|p| p.k().is_none()) {
        Some(i) => Err(Failure::input(format!(
            "Error: plant {} has no gain K",
            i + 1
        ))),
        None => Ok(()),
    }
}

fn period_error(inst: &Instance, period: usize) -> std::result::Result<Option<String>, Failure> {
    let lm = lmin(inst.n_plants(), inst.network.capacity())?;
    Ok((period < lm).then(|| format!("Error: period {period} is below the minimum period {lm}")))
}

fn analyze(
    config: &Path,
    schedule: &Path,
    plant: Option<usize>,
    stdout: &mut dyn Write,
) -> CmdResult {
    let inst = load_instance(config)?;
    require_gains(&inst)?;
    let sched = load_schedule(schedule, &inst)?;
    let p = inst.network.loss_probability();
    let ids: Vec<usize> = match plant {
        Some(i) if i == 0 || i > inst.n_plants() => {
            return Err(Failure::input(format!("Error: no plant {i}")));
        }
        Some(i) => vec![i],
        None => (1..=inst.n_plants()).collect(),
    };
    let mut rows = Vec::new();
    let mut unstable = Vec::new();
    for i in ids {
        let modes = inst.plants[i - 1].mode_pair()?;
        let report = is_esms(&modes, &sched, i, p, ESMS_TOL)?;
        let certificate = if report.esms {
            Some(solve_certificate(&modes, &sched, i, p)?.to_json_value())
        } else {
            unstable.push(format!("plant {i} (radius {})", report.radius));
            None
        };
        rows.push(serde_json::json!({
            "plant": i,
            "radius": report.radius,
            "esms": report.esms,
            "certificate": certificate,
        }));
    }
    emit(
        None,
        &pretty(&serde_json::json!({ "plants": rows })),
        stdout,
    )?;
    if unstable.is_empty() {
        Ok(())
    } else {
        Err(Failure::verdict(format!(
            "FAIL: not second-moment stable: {}",
            unstable.join(", ")
        )))
    }
}

fn search_options(common: &SearchArgs, mode: SearchMode) -> ScheduleOptions {
    ScheduleOptions {
        mode,
        allow_large: common.allow_large,
        ..ScheduleOptions::default()
    }
}

fn schedule(
    config: &Path,
    period: usize,
    all: bool,
    common: &SearchArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let inst = load_instance(config)?;
    require_gains(&inst)?;
    let mode = if all {
        SearchMode::BestMargin
    } else {
        SearchMode::FirstFeasible
    };
    let verdict = design_schedule(
        &inst.plants,
        &inst.network,
        period,
        &search_options(common, mode),
    )?;
    match &verdict.outcome {
        ScheduleOutcome::ErrorPeriodTooShort { lmin } => Err(Failure::verdict(format!(
            "Error: period {period} is below the minimum period {lmin}"
        ))),
        ScheduleOutcome::NoStabilizingSchedule => {
            for diag in &verdict.diagnostics {
                let _ = writeln!(stderr, "candidate {:?}: radii {:?}", diag.sets, diag.radii);
            }
            Err(Failure::verdict(format!(
                "No stabilizing periodic scheduling sequence of period {period}"
            )))
        }
        ScheduleOutcome::Schedule {
            schedule, radii, ..
        } => {
            let _ = writeln!(
                stderr,
                "schedule {:?} with radii {radii:?}",
                schedule.slots()
            );
            let json = verdict.to_json_value().expect("schedule outcome has JSON");
            emit(common.out.as_deref(), &pretty(&json), stdout)
        }
    }
}

fn synth(
    config: &Path,
    period: usize,
    recovery: RecoveryArg,
    common: &SearchArgs,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CmdResult {
    let inst = load_instance(config)?;
    if let Some(msg) = period_error(&inst, period)? {
        return Err(Failure::verdict(msg));
    }
    let opts = ControllerOptions {
        recovery: match recovery {
            RecoveryArg::Verbatim => GainRecovery::Verbatim,
            RecoveryArg::Averaged => GainRecovery::Averaged,
        },
        schedule: search_options(common, SearchMode::FirstFeasible),
        ..ControllerOptions::default()
    };
    let plants: Vec<Plant> = inst.plants.iter().map(Plant::without_gain).collect();
    let result = design_controllers(&plants, &inst.network, period, &opts)?;
    for line in &result.diagnostics {
        let _ = writeln!(stderr, "{line}");
    }
    match &result.outcome {
        GainOutcome::Fail => Err(Failure::verdict(format!(
            "FAIL: no gains found after {} candidates",
            result.candidates_examined
        ))),
        GainOutcome::Success {
            candidate_radii, ..
        } => {
            let _ = writeln!(stderr, "gains validated with radii {candidate_radii:?}");
            let json = result.to_json_value().expect("success has JSON");
            emit(common.out.as_deref(), &pretty(&json), stdout)
        }
    }
}

fn controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let d = a.nrows();
    let mut blocks = Vec::with_capacity(d);
    let mut power = b.clone();
    for _ in 0..d {
        blocks.push(power.clone());
        power = a * power;
    }
    let ctrb = DMatrix::from_columns(
        &blocks
            .iter()
            .flat_map(|m| m.column_iter().map(|c| c.into_owned()))
            .collect::<Vec<_>>(),
    );
    let svd = ctrb.svd(false, false);
    let top = svd.singular_values.max();
    let tol = top * f64::EPSILON * (d.max(d * b.ncols()) as f64);
    svd.singular_values.iter().filter(|&&s| s > tol).count() == d
}

fn gen_instance(args: &GenArgs, seed: u64) -> std::result::Result<Instance, Failure> {
    if args.plants == 0 || args.dim == 0 || args.inputs == 0 {
        return Err(Failure::input(
            "Error: plants, dim and inputs must be positive",
        ));
    }
    if !(args.state_cost > 0.0 && args.input_cost > 0.0) {
        return Err(Failure::input(
            "Error: state and input costs must be positive",
        ));
    }
    let network = NetworkConfig::new(args.capacity, args.loss)?;
    network.check_plants(args.plants)?;
    let (d, m) = (args.dim, args.inputs);
    let q = DMatrix::identity(d, d) * args.state_cost;
    let r = DMatrix::identity(m, m) * args.input_cost;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = 0;
    let mut plants = Vec::with_capacity(args.plants);
    while plants.len() < args.plants {
        if draws == GEN_MAX_DRAWS {
            return Err(Failure {
                code: EXIT_NUMERICAL,
                message: format!("Error: no admissible plant after {GEN_MAX_DRAWS} draws"),
            });
        }
        draws += 1;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-2.0..=2.0));
        let b = DMatrix::from_fn(d, m, |_, _| f64::from(u8::from(rng.random_bool(0.5))));
        if spectral_radius(&a)? < 1.0 || !controllable(&a, &b) {
            continue;
        }
        let (k, _) = lqr(&a, &b, &q, &r)?;
        plants.push(Plant::new(a, b, Some(k))?);
    }
    Ok(Instance::new(plants, network, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controllability_rank() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(controllable(
            &a,
            &DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
        ));
        assert!(!controllable(
            &a,
            &DMatrix::from_row_slice(2, 1, &[1.0, 0.0])
        ));
        assert!(!controllable(&a, &DMatrix::zeros(2, 1)));
    }

    #[test]
    fn generated_plants_are_unstable_controllable_and_closed_loop_stable() {
        let args = GenArgs {
            plants: 4,
            dim: 3,
            inputs: 1,
            capacity: 2,
            loss: 0.5,
            state_cost: 5.0,
            input_cost: 1.0,
        };
        let inst = gen_instance(&args, 7).unwrap();
        for p in &inst.plants {
            assert!(spectral_radius(p.a()).unwrap() >= 1.0);
            assert!(controllable(p.a(), p.b()));
            let closed = p.a() + p.b() * p.k().unwrap();
            assert!(spectral_radius(&closed).unwrap() < 1.0);
            assert!(p.b().iter().all(|&x| x == 0.0 || x == 1.0));
            assert!(p.a().iter().all(|&x| (-2.0..=2.0).contains(&x)));
        }
        assert_eq!(gen_instance(&args, 7).unwrap(), inst);
    }
}

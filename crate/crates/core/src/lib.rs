//! Stabilizing periodic schedules and static state-feedback gains for
//! several discrete-time plants that share a small number of lossy network
//! channels.
//!
//! At each step only `M` of the `N` plants may transmit, and each transmitted
//! control packet is lost independently with probability `p`. A plant whose
//! packet arrives runs its closed loop `A + BK`; otherwise it runs open loop
//! `A`. Under a periodic schedule each plant is a periodic Markov jump linear
//! system, and its second moment decays exponentially exactly when a one-period
//! monodromy operator has spectral radius below one.
//!
//! - [`synth_schedule::design_schedule`] searches periodic schedules for given gains.
//! - [`synth_controller::design_controllers`] searches gains with staged LMI problems.
//! - [`sim::simulate`] runs seeded Monte Carlo trajectories.

pub mod error;
pub mod instance;
pub mod linalg;
pub mod lmi;
pub mod lyapunov;
pub mod model;
pub mod riccati;
pub mod sim;
pub mod synth_controller;
pub mod synth_schedule;

pub use error::{Error, Result};
pub use instance::Instance;
pub use linalg::{SVec, SymMat};
pub use lyapunov::CoupledCertificate;
pub use model::{Mode, ModePair, NetworkConfig, PeriodicSchedule, Plant};

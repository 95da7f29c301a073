//! Closed-loop real-time operation of small distribution feeders.
//!
//! The crate wires four blocks into the discrete-time loop exercised by
//! the simulator and the `gridofo` CLI:
//!
//! * [`network`] — topology, per-unit admittance matrix, and the channel
//!   maps splitting injections into controllable inputs and disturbances;
//! * [`powerflow`] — the residual, its analytic Jacobians, a Newton
//!   solver, and a sensitivity-conditioned online solver that tracks the
//!   moving high-voltage solution with a fixed number of iterations per
//!   step;
//! * [`estimation`] — an extended Kalman filter reconstructing the
//!   disturbances from sparse voltage measurements and pseudo-measurement
//!   forecasts;
//! * [`ofo`] — the incremental set-point controllers: a QP step that
//!   enforces voltage limits through linearized constraints (backed by the
//!   dense active-set solver in [`qp`]) and a projected-gradient baseline
//!   with soft penalties.
//!
//! [`oracle`] provides frozen-time reference solutions for tracking-error
//! metrics, and [`sim`] is the scenario harness with CSV traces and
//! summary metrics.

pub mod error;
pub mod estimation;
mod linalg;
pub mod network;
pub mod ofo;
pub mod oracle;
pub mod powerflow;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
pub use estimation::{EstimatorState, MeasChannel, MeasurementModel};
pub use network::{
    assemble_injections, build_admittance, DisturbanceChannel, DisturbanceVector, GridFixture,
    GridModel, InputChannel, InputVector, Line, PowerKind,
};
pub use ofo::{OfoConfig, OfoStep, Theta};
pub use oracle::{OpfSolution, OracleCache};
pub use powerflow::{
    flat_start, jacobians, newton_solve, online_pf_step, residual, sensitivities, GridState,
    NewtonOutcome, PfJacobians,
};
pub use qp::{solve_qp, QpProblem, QpSolution};
pub use sim::{run_scenario, run_scenario_streaming, Scenario, ScenarioSpec, ScenarioTrace};

//! Phasor-domain ("transient stability") simulation: devices, power flow,
//! subsystems, and the multi-area network solution.
//!
//! All dynamic devices integrate with the trapezoidal rule on a common step,
//! alternating with the algebraic network solution until the joint fixed
//! point converges.

mod acmotor;
mod machine;
mod mate;
pub mod powerflow;
mod subsystem;

pub use acmotor::{AcMotor, AcMotorParams, MotorStatus};
pub use machine::{Machine, MachineParams, MachineState, StatorSolution};
pub use mate::{
    Link, MateSystem, NetworkSolveReport, StallEvent, StepReport, INTERFACE_MAX_ITERATIONS,
    INTERFACE_TOLERANCE, NETWORK_MAX_PASSES, NETWORK_TOLERANCE,
};
pub use powerflow::{solve as solve_power_flow, solve_with_voltage_loads, PfBusKind, PowerFlowProblem, PowerFlowSolution};
pub use subsystem::{
    ConstZLoad, FaultSpec, NortonEquivalent, PhasorSubsystem, VoltageSolution,
};

//! Hybrid EMT / phasor-domain power system dynamic simulator.
//!
//! The simulation runs in up to three stages: a pure phasor (TS) stage, a
//! hybrid stage where a small point-on-wave EMT subsystem is embedded in the
//! phasor network through boundary equivalents exchanged every interaction
//! step, and a final phasor stage entered automatically once the boundary
//! conditions of the two detailed-system representations converge.
//!
//! Module map:
//! - [`net`] — network data model, symmetrical components, admittance
//!   matrices, topology splitting.
//! - [`casefile`] — the `.hyb` text case format.
//! - [`phasor`] — phasor-domain dynamic simulation (machines, A/C motor
//!   performance models, Newton-Raphson power flow, MATE subsystem
//!   reconciliation).
//! - [`emt`] — fixed-step trapezoidal EMT solver with a dynamic single-phase
//!   induction motor and point-on-wave fault switching.
//! - [`boundary`] — waveform phasor extraction and Thévenin/Norton boundary
//!   equivalents.
//! - [`coordinator`] — the three-stage state machine, the switching
//!   controller, event reconciliation and the optional TCP transport.
//! - [`report`] — time series output, CSV schema and run comparison.

pub mod boundary;
pub mod casefile;
pub mod coordinator;
pub mod emt;
pub mod error;
pub mod net;
pub mod phasor;
pub mod report;

pub use error::Error;

/// Complex scalar used throughout.
pub type Cx = num_complex::Complex64;

/// Result alias for fallible library operations.
pub type Result<T> = std::result::Result<T, Error>;

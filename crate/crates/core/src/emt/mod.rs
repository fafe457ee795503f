//! Instantaneous-value (electromagnetic transient) simulation.

pub mod circuit;
pub mod spim;

pub use circuit::{EmtCircuit, EmtStallEvent};
pub use spim::{cross_field_point, Spim, SpimParams, SpimPhasorPoint, SpimStatus};

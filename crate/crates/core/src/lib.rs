//! Hierarchical frequency and voltage control for multi-area power grids
//! with inverter-based resources: grid model, staged constrained power
//! flow, detection and dispatch pipelines, a quasi-static phasor
//! simulator, and the coordinator layer that ties them together.

pub mod coordinator;
pub mod dynamics;
pub mod error;
pub mod freq;
pub mod grid;
pub mod optimizer;
pub mod powerflow;
pub mod scenario;
pub mod volt;

pub use error::*;

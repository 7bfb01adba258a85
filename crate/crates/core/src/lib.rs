//! Flow-matching and monolithic temporal-difference critics on toy MDPs, the
//! probes used to study them (test-time recovery, conic audits, staleness,
//! target noise, layer freezing, feature norms) and an exact simulator of the
//! linear gradient-flow model of integration-based critics.

pub mod diffnet;
pub mod envlab;
pub mod error;
pub mod experiments;
pub mod flowcritic;
pub mod lintheory;
pub mod monocritic;
pub mod probes;
pub mod training;

pub use error::{Error, Result};

//! Benchmarks and attack scenarios for the simulated audit network.

pub mod scenarios;
pub mod sweep;
pub mod workload;

//! Configuration-driven experiment runner for the `sdg` binary.

pub mod config;
pub mod run;

//! Monte Carlo engine for pricing and risk-measuring guaranteed minimum
//! withdrawal benefits under stochastic volatility with jumps.

pub mod branching;
pub mod commands;
pub mod config;
pub mod contract;
pub mod error;
pub mod euler;
pub mod kernel;
pub mod output;
pub mod params;
pub mod pricing;
pub mod risk;
pub mod rng;
pub mod stats;
pub mod validate;

pub use error::Error;

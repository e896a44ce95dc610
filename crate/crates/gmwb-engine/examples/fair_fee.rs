//! Solve the fair base rider fee for several VIX-fee multipliers.
//!
//! For each multiplier m the rider charges c_bar + m * VIX^2 per year; the
//! fair c_bar makes the guarantee's net liability zero. A higher multiplier
//! collects more fee income in turbulent markets, so it buys a lower base
//! level. The solve bisects on c_bar, reusing one seed so the liability is
//! a smooth function of the fee.
//!
//! Run with: cargo run --release --example fair_fee
//!
//! About a minute on one core at this scale; pass a larger particle count
//! as the first argument to tighten the standard errors.

use std::time::Instant;

use gmwb_engine::contract::ContractSpec;
use gmwb_engine::params::{FeeStructure, MarketParams};
use gmwb_engine::pricing::{
    fair_base_fee, SimConfig, DEFAULT_FEE_BRACKET, DEFAULT_FEE_TOL,
};

fn main() -> Result<(), gmwb_engine::Error> {
    let n_particles: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("particle count"))
        .unwrap_or(50_000);

    let market = MarketParams::benchmark();
    let contract = ContractSpec::constant(100.0, 7.0);
    let (lo, hi) = DEFAULT_FEE_BRACKET;

    println!("   m   c_bar_star_pct   std_error_pct   evaluations   seconds");
    for &m in &[0.0, 0.1, 0.2, 0.3] {
        let fee = FeeStructure {
            q: 0.0075,
            c_bar: 0.0,
            m,
        };
        let config = SimConfig::risk_neutral(
            market,
            fee,
            contract.clone(),
            1.0 / 250.0,
            n_particles,
            20_260_819,
        );
        let start = Instant::now();
        let solution = fair_base_fee(&config, lo, hi, DEFAULT_FEE_TOL)?;
        println!(
            "{m:4.1}   {:14.4}   {:13.4}   {:11}   {:7.1}",
            100.0 * solution.c_bar,
            100.0 * solution.std_error,
            solution.evaluations,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

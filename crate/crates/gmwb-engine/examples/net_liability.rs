//! Price the benchmark guarantee at a given rider fee and report the net
//! liability of the guarantee with its Monte Carlo error.
//!
//! The liability is the expected discounted guarantee payout minus the
//! expected discounted rider fee income; at a fairly priced fee it is zero
//! within the standard error.
//!
//! Run with: cargo run --release --example net_liability

use std::time::Instant;

use gmwb_engine::contract::ContractSpec;
use gmwb_engine::params::{FeeStructure, MarketParams};
use gmwb_engine::pricing::{net_liability, SimConfig};

fn main() -> Result<(), gmwb_engine::Error> {
    let market = MarketParams::benchmark();
    // A rider at 30% of squared VIX plus a 1.76% base level, which is close
    // to fair for the benchmark contract below (see the fair_fee example).
    let fee = FeeStructure {
        q: 0.0075,
        c_bar: 0.0176,
        m: 0.3,
    };
    // 100 premium paid back at 7 per year, so the guarantee runs ~14.3 years.
    let contract = ContractSpec::constant(100.0, 7.0);
    let config = SimConfig::risk_neutral(market, fee, contract, 1.0 / 250.0, 50_000, 20_260_819);

    let start = Instant::now();
    let est = net_liability(&config)?;
    let elapsed = start.elapsed();

    println!("particles        {}", config.n_particles);
    println!("grid step        {:.6} years", config.h);
    println!("net liability    {:+.4}", est.value);
    println!("std error        {:.4}", est.std_error);
    println!("effective size   {:.1}", est.n_effective);
    println!("wall time        {:.2?}", elapsed);
    Ok(())
}

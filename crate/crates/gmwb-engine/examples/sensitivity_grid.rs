//! How volatility-linked fees immunize the liability against the market's
//! starting state.
//!
//! Each multiplier gets its own fair base fee, solved at v0 = 0.04; the
//! liability is then re-priced across other initial variances with the fee
//! held fixed. With a flat fee (m = 0) a calm start means less fee income
//! and a mispriced book; the larger the multiplier, the flatter the
//! liability across starting variance, because fee income then scales with
//! realized turbulence.
//!
//! Run with: cargo run --release --example sensitivity_grid

use gmwb_engine::contract::ContractSpec;
use gmwb_engine::params::{FeeStructure, MarketParams};
use gmwb_engine::pricing::SimConfig;
use gmwb_engine::risk::{sensitivity_sweep, FeeMode, SweepKind};

fn main() -> Result<(), gmwb_engine::Error> {
    let base = SimConfig::risk_neutral(
        MarketParams::benchmark(),
        FeeStructure {
            q: 0.0075,
            c_bar: 0.0,
            m: 0.0,
        },
        ContractSpec::constant(100.0, 7.0),
        1.0 / 250.0,
        20_000,
        481_516,
    );
    let v0_grid = [0.02, 0.04, 0.06, 0.08];
    let m_grid = [0.0, 0.1, 0.2, 0.3];

    let rows = sensitivity_sweep(
        &base,
        &v0_grid,
        &m_grid,
        &FeeMode::Fair { tol: 1e-4 },
        SweepKind::Liability,
    )?;

    println!("liability by initial variance (rows) and multiplier (columns)");
    print!("   v0  ");
    for &m in &m_grid {
        print!("   m={m:<4}      ");
    }
    println!();
    for (i, &v0) in v0_grid.iter().enumerate() {
        print!("{v0:6.2} ");
        for (j, _) in m_grid.iter().enumerate() {
            let row = &rows[j * v0_grid.len() + i];
            let est = row.liability.expect("liability sweep");
            print!("{:+8.3} ({:.3}) ", est.value, est.std_error);
        }
        println!();
    }

    println!("\nliability range across v0 (flatter is better hedged):");
    for (j, &m) in m_grid.iter().enumerate() {
        let cells = &rows[j * v0_grid.len()..(j + 1) * v0_grid.len()];
        let hi = cells.last().unwrap().liability.unwrap().value;
        let lo = cells.first().unwrap().liability.unwrap().value;
        println!(
            "  m={m:<4} fair c_bar {:6.4}%  range {:+.3}",
            100.0 * cells[0].c_bar,
            hi - lo
        );
    }
    Ok(())
}

//! Manifests make every run replayable byte for byte.
//!
//! Each command writes its tables plus a manifest holding the resolved
//! configuration, the derived constants and the command arguments. Feeding
//! the manifest back through the rerun path must reproduce the CSV exactly,
//! whatever the thread count, because every particle's randomness is keyed
//! by its identity rather than by scheduling order. This example runs a
//! small pricing command twice, once via the manifest, and diffs the bytes.
//!
//! Run with: cargo run --release --example reproducible_runs

use gmwb_engine::commands::{cmd_net_liability, cmd_rerun};
use gmwb_engine::config::{ConfigDoc, ContractSection, SimSection};
use gmwb_engine::params::{FeeStructure, MarketParams};
use gmwb_engine::pricing::{Measure, MemoryMode};

fn main() -> Result<(), gmwb_engine::Error> {
    let doc = ConfigDoc {
        market: MarketParams::benchmark(),
        premia: None,
        fee: FeeStructure {
            q: 0.0075,
            c_bar: 0.0246,
            m: 0.0,
        },
        contract: ContractSection {
            f0: 100.0,
            withdrawal_schedule: gmwb_engine::contract::ContractSpec::constant(100.0, 7.0)
                .withdrawals,
        },
        sim: SimSection {
            n_paths: 5_000,
            h: 1.0 / 50.0,
            seed: 20_260_819,
            measure: Measure::RiskNeutral,
            epsilon: 1e-4,
            q1: 1.0,
            q2: 1.0,
            branching: true,
            sub_steps: 1,
            memory_mode: MemoryMode::SinglePass,
            batches: 50,
            pooled_normals: false,
        },
    };

    let dir = std::env::temp_dir().join(format!("gmwb-repro-{}", std::process::id()));
    let first = dir.join("first");
    let replay = dir.join("replay");

    let manifest = cmd_net_liability(&doc, &first)?;
    println!("first run wrote:");
    for output in &manifest.outputs {
        println!("  {} ({} rows)", output.file, output.rows);
    }
    println!("  seed {}   engine {}", manifest.seed, manifest.engine_version);

    let manifest2 = cmd_rerun(&manifest, &replay)?;
    let a = std::fs::read(first.join("net_liability.csv"))?;
    let b = std::fs::read(replay.join("net_liability.csv"))?;
    println!(
        "\nreplay from manifest: {} rows, csv {}",
        manifest2.outputs[0].rows,
        if a == b {
            "byte-identical"
        } else {
            "DIFFERS (this is a bug)"
        }
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

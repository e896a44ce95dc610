//! Deterministic run outputs: CSV tables and the JSON run manifest.
//!
//! Every table is RFC-4180 CSV with a header row and CRLF record ends, and
//! every float is printed at 17 significant digits so values round-trip
//! bit-exactly. A manifest written next to the tables captures the resolved
//! configuration, the derived constants it implies, the command arguments
//! and the files produced; the `rerun` command replays a manifest and must
//! reproduce every table byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ConfigDoc;
use crate::error::Error;
use crate::params::{DerivedConstants, RealWorldParams};
use crate::pricing::Measure;
use crate::risk::SweepKind;

/// Print a float with 17 significant digits, enough to reconstruct the
/// exact binary value.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write one CSV table: header row plus stringified records, RFC-4180
/// framing. Returns the number of data rows written.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<usize, Error> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(rows.len())
}

/// Command arguments as stored in manifests: everything beyond the
/// configuration document that shaped a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum CommandArgs {
    /// Solve the fair base rider fee for each multiplier.
    FairFee { m_list: Vec<f64>, fee_tol: f64 },
    /// Price the guarantee at the configured fee.
    NetLiability,
    /// Real-world loss samples and summary statistics.
    LossDist,
    /// Liability or loss summaries over an initial-variance and multiplier
    /// grid. `fees` holds presolved base fees (positionally matching
    /// `m_grid`); when empty the fee is solved per multiplier to `fee_tol`.
    Sensitivity {
        v0_grid: Vec<f64>,
        m_grid: Vec<f64>,
        kind: SweepKind,
        fees: Vec<f64>,
        fee_tol: f64,
    },
    /// Run the validation battery.
    Validate { full: bool },
}

impl CommandArgs {
    /// Manifest and output file stem for this command.
    pub fn name(&self) -> &'static str {
        match self {
            CommandArgs::FairFee { .. } => "fair_fee",
            CommandArgs::NetLiability => "net_liability",
            CommandArgs::LossDist => "loss_dist",
            CommandArgs::Sensitivity { .. } => "sensitivity",
            CommandArgs::Validate { .. } => "validate",
        }
    }
}

/// One file a command produced, named relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub rows: usize,
}

/// Everything needed to reproduce and audit one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Version of the engine that produced the run.
    pub engine_version: String,
    /// The command and its arguments.
    #[serde(flatten)]
    pub args: CommandArgs,
    /// Seed actually used (after any command-line override).
    pub seed: u64,
    /// Resolved configuration document, override included.
    pub config: ConfigDoc,
    /// Closed-form constants implied by the market and fee sections.
    pub derived: DerivedConstants,
    /// Real-world coefficients, echoed when the run prices under that
    /// measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_world: Option<RealWorldParams>,
    /// Wall-clock duration of the command, seconds. Informational only; not
    /// replayed.
    pub wall_time_seconds: f64,
    /// Tables written, relative to the manifest's directory.
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    /// Assemble a manifest skeleton: constants are derived here so every
    /// manifest echoes them even if the command itself never looked.
    pub fn new(args: CommandArgs, config: &ConfigDoc) -> Result<RunManifest, Error> {
        let derived = crate::params::derive_constants(&config.market, &config.fee)?;
        let real_world = match (config.sim.measure, &config.premia) {
            (Measure::RealWorld, Some(premia)) => Some(crate::params::derive_p_params(
                &config.market,
                premia,
                &derived,
            )?),
            _ => None,
        };
        Ok(RunManifest {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            args,
            seed: config.sim.seed,
            config: config.clone(),
            derived,
            real_world,
            wall_time_seconds: 0.0,
            outputs: Vec::new(),
        })
    }

    /// Write the manifest as pretty JSON named `<command>_manifest.json`.
    /// Returns the path written.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, Error> {
        let path = out_dir.join(format!("{}_manifest.json", self.args.name()));
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    /// Read a manifest back.
    pub fn from_path(path: &Path) -> Result<RunManifest, Error> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

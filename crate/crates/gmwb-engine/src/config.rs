//! Run configuration document: one JSON file with `market`, `premia`,
//! `fee`, `contract` and `sim` sections that resolves into a [`SimConfig`].
//!
//! The document is the hand-editable face of the engine: every rate is a
//! per-year decimal, the withdrawal schedule is a list of
//! `{from_year, to_year, rate}` segments, and every numerical control in the
//! `sim` section beyond `n_paths` and `h` is optional with the engine
//! default. Unknown keys are rejected everywhere so a typo cannot silently
//! fall back to a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contract::{ContractSpec, WithdrawalSegment};
use crate::error::Error;
use crate::params::{FeeStructure, MarketParams, RiskPremia};
use crate::pricing::{Measure, MemoryMode, SimConfig};

/// Top-level JSON configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub market: MarketParams,
    /// Risk premia; required when the sim section selects the real-world
    /// measure, ignored otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premia: Option<RiskPremia>,
    pub fee: FeeStructure,
    pub contract: ContractSection,
    pub sim: SimSection,
}

/// Contract terms as they appear in the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSection {
    /// Initial premium.
    pub f0: f64,
    /// Piecewise-constant annual withdrawal rates; segments must tile
    /// `[0, ...)` from year zero and eventually pay the premium back.
    pub withdrawal_schedule: Vec<WithdrawalSegment>,
}

/// Simulation controls. `n_paths` and `h` are required; the rest default to
/// the engine's standard settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Initial particle count.
    pub n_paths: usize,
    /// Grid step length in years.
    pub h: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_measure")]
    pub measure: Measure,
    /// Variance floor freezing the likelihood weight; see the kernel
    /// documentation for how to size it against the substep diffusion scale.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_unit")]
    pub q1: f64,
    #[serde(default = "default_unit")]
    pub q2: f64,
    #[serde(default = "default_true")]
    pub branching: bool,
    #[serde(default = "default_sub_steps")]
    pub sub_steps: usize,
    #[serde(default = "default_memory_mode")]
    pub memory_mode: MemoryMode,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default)]
    pub pooled_normals: bool,
}

fn default_measure() -> Measure {
    Measure::RiskNeutral
}

fn default_epsilon() -> f64 {
    1e-4
}

fn default_unit() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_sub_steps() -> usize {
    1
}

fn default_memory_mode() -> MemoryMode {
    MemoryMode::SinglePass
}

fn default_batches() -> usize {
    50
}

impl ConfigDoc {
    /// Parse a document from JSON text. Syntax and schema violations both
    /// surface the offending line and column.
    pub fn from_json(text: &str) -> Result<ConfigDoc, Error> {
        Ok(serde_json::from_str(text)?)
    }

    /// Read and parse a document from a file.
    pub fn from_path(path: &Path) -> Result<ConfigDoc, Error> {
        let text = fs::read_to_string(path)?;
        ConfigDoc::from_json(&text)
    }

    /// Serialize back to pretty JSON, e.g. for echoing into a manifest.
    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolve into a validated simulation configuration.
    pub fn resolve(&self) -> Result<SimConfig, Error> {
        let config = SimConfig {
            market: self.market,
            premia: self.premia,
            fee: self.fee,
            contract: ContractSpec {
                f0: self.contract.f0,
                withdrawals: self.contract.withdrawal_schedule.clone(),
            },
            measure: self.sim.measure,
            h: self.sim.h,
            n_particles: self.sim.n_paths,
            seed: self.sim.seed,
            epsilon: self.sim.epsilon,
            q1: self.sim.q1,
            q2: self.sim.q2,
            branching: self.sim.branching,
            sub_steps: self.sim.sub_steps,
            memory_mode: self.sim.memory_mode,
            batches: self.sim.batches,
            pooled_normals: self.sim.pooled_normals,
        };
        self.market.validate()?;
        self.fee.validate()?;
        config.validate()?;
        // Surface derived-constant problems (bad premia, nonpositive
        // reversion after the measure change) at load time rather than at
        // the first simulation call.
        config.kernel_coeffs()?;
        Ok(config)
    }

    /// Document whose resolution equals the given configuration. Inverse of
    /// [`ConfigDoc::resolve`] up to validation.
    pub fn from_sim_config(config: &SimConfig) -> ConfigDoc {
        ConfigDoc {
            market: config.market,
            premia: config.premia,
            fee: config.fee,
            contract: ContractSection {
                f0: config.contract.f0,
                withdrawal_schedule: config.contract.withdrawals.clone(),
            },
            sim: SimSection {
                n_paths: config.n_particles,
                h: config.h,
                seed: config.seed,
                measure: config.measure,
                epsilon: config.epsilon,
                q1: config.q1,
                q2: config.q2,
                branching: config.branching,
                sub_steps: config.sub_steps,
                memory_mode: config.memory_mode,
                batches: config.batches,
                pooled_normals: config.pooled_normals,
            },
        }
    }
}

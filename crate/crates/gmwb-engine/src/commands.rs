//! Command layer behind the CLI: each function runs one command against a
//! resolved configuration document, writes its CSV tables into an output
//! directory, and writes a manifest from which `rerun` can replay the
//! command byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::ConfigDoc;
use crate::error::Error;
use crate::output::{sig17, write_csv, CommandArgs, OutputFile, RunManifest};
use crate::pricing::{
    fair_base_fee, fee_and_payout_estimates, net_liability_estimate, simulate, Measure,
    DEFAULT_FEE_BRACKET,
};
use crate::risk::{sensitivity_sweep, FeeMode, LossDistribution, SweepKind};
use crate::validate::{run_battery, ValidationReport, ValidationScale};

/// Ensure the output directory exists and return it as owned.
fn prepare_out_dir(out_dir: &Path) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(out_dir)?;
    Ok(out_dir.to_path_buf())
}

fn finish(
    mut manifest: RunManifest,
    started: Instant,
    outputs: Vec<OutputFile>,
    out_dir: &Path,
) -> Result<RunManifest, Error> {
    manifest.outputs = outputs;
    manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Solve the fair base rider fee for each multiplier in `m_list` and write
/// `fair_fee.csv` with one row per multiplier.
///
/// Fee solving is a pricing-measure exercise, so the run ignores the
/// document's measure selection; everything else (grid, particle count,
/// seed, contract) is taken as configured. Fees are reported in percent.
pub fn cmd_fair_fee(
    doc: &ConfigDoc,
    m_list: &[f64],
    fee_tol: f64,
    out_dir: &Path,
) -> Result<RunManifest, Error> {
    let started = Instant::now();
    if m_list.is_empty() {
        return Err(Error::InvalidParameter(
            "fair-fee needs at least one multiplier; m_list is empty".to_string(),
        ));
    }
    if !(fee_tol > 0.0 && fee_tol.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "fee tolerance {fee_tol} must be positive and finite"
        )));
    }
    let out_dir = prepare_out_dir(out_dir)?;
    let base = doc.resolve()?;
    let manifest = RunManifest::new(
        CommandArgs::FairFee {
            m_list: m_list.to_vec(),
            fee_tol,
        },
        doc,
    )?;

    let (lo, hi) = DEFAULT_FEE_BRACKET;
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut config = base.clone();
        config.measure = Measure::RiskNeutral;
        config.fee.m = m;
        let solution = fair_base_fee(&config, lo, hi, fee_tol)?;
        rows.push(vec![
            sig17(m),
            sig17(100.0 * solution.c_bar),
            sig17(100.0 * solution.std_error),
            config.n_particles.to_string(),
            sig17(config.h),
            config.seed.to_string(),
        ]);
    }
    let path = out_dir.join("fair_fee.csv");
    let n = write_csv(
        &path,
        &["m", "c_bar_star_pct", "std_error", "n_paths", "h", "seed"],
        &rows,
    )?;
    finish(
        manifest,
        started,
        vec![OutputFile {
            file: "fair_fee.csv".to_string(),
            rows: n,
        }],
        &out_dir,
    )
}

/// Price the guarantee at the configured fee and write `net_liability.csv`:
/// the net liability with its standard error, plus the fee-income and
/// payout legs it nets.
pub fn cmd_net_liability(doc: &ConfigDoc, out_dir: &Path) -> Result<RunManifest, Error> {
    let started = Instant::now();
    let out_dir = prepare_out_dir(out_dir)?;
    let mut config = doc.resolve()?;
    config.measure = Measure::RiskNeutral;
    let manifest = RunManifest::new(CommandArgs::NetLiability, doc)?;

    let output = simulate(&config)?;
    let liability = net_liability_estimate(&output, config.batches);
    let (fee_income, payout) = fee_and_payout_estimates(&output, config.batches);
    let rows = vec![vec![
        sig17(config.market.v0),
        sig17(config.fee.m),
        sig17(config.fee.c_bar),
        sig17(liability.value),
        sig17(liability.std_error),
        sig17(fee_income.value),
        sig17(fee_income.std_error),
        sig17(payout.value),
        sig17(payout.std_error),
        sig17(liability.n_effective),
        config.n_particles.to_string(),
        sig17(config.h),
        config.seed.to_string(),
    ]];
    let n = write_csv(
        &out_dir.join("net_liability.csv"),
        &[
            "v0",
            "m",
            "c_bar",
            "liability",
            "std_error",
            "fee_income",
            "fee_income_se",
            "payout",
            "payout_se",
            "n_effective",
            "n_paths",
            "h",
            "seed",
        ],
        &rows,
    )?;
    finish(
        manifest,
        started,
        vec![OutputFile {
            file: "net_liability.csv".to_string(),
            rows: n,
        }],
        &out_dir,
    )
}

/// Simulate the real-world loss distribution and write both the weighted
/// samples (`loss_samples.csv`) and the summary statistics
/// (`loss_summary.csv`).
pub fn cmd_loss_dist(doc: &ConfigDoc, out_dir: &Path) -> Result<RunManifest, Error> {
    let started = Instant::now();
    let out_dir = prepare_out_dir(out_dir)?;
    let config = doc.resolve()?;
    let manifest = RunManifest::new(CommandArgs::LossDist, doc)?;

    let dist = LossDistribution::from_config(&config)?;
    let sample_rows: Vec<Vec<String>> = dist
        .samples()
        .iter()
        .map(|&(loss, weight)| vec![sig17(loss), sig17(weight)])
        .collect();
    let n_samples = write_csv(
        &out_dir.join("loss_samples.csv"),
        &["loss", "weight"],
        &sample_rows,
    )?;

    let batches = config.batches.min(dist.len());
    let summary = dist.summary(batches)?;
    let var90 = dist.var(0.90)?;
    let summary_rows = vec![vec![
        sig17(summary.mean),
        sig17(summary.mean_se),
        sig17(summary.variance),
        sig17(summary.variance_se),
        sig17(summary.cte90),
        sig17(summary.cte90_se),
        sig17(var90),
        summary.n_samples.to_string(),
        sig17(summary.total_weight),
        config.n_particles.to_string(),
        sig17(config.h),
        config.seed.to_string(),
    ]];
    let n_summary = write_csv(
        &out_dir.join("loss_summary.csv"),
        &[
            "mean",
            "mean_se",
            "variance",
            "variance_se",
            "cte90",
            "cte90_se",
            "var90",
            "n_samples",
            "total_weight",
            "n_paths",
            "h",
            "seed",
        ],
        &summary_rows,
    )?;
    finish(
        manifest,
        started,
        vec![
            OutputFile {
                file: "loss_samples.csv".to_string(),
                rows: n_samples,
            },
            OutputFile {
                file: "loss_summary.csv".to_string(),
                rows: n_summary,
            },
        ],
        &out_dir,
    )
}

/// Sweep initial variance and multiplier grids and write `sensitivity.csv`.
///
/// Liability sweeps need a risk-neutral document, loss sweeps a real-world
/// one. When `fees` is empty the base fee is solved per multiplier to
/// `fee_tol`; otherwise `fees` pairs positionally with `m_grid` and is used
/// as given.
pub fn cmd_sensitivity(
    doc: &ConfigDoc,
    v0_grid: &[f64],
    m_grid: &[f64],
    kind: SweepKind,
    fees: &[f64],
    fee_tol: f64,
    out_dir: &Path,
) -> Result<RunManifest, Error> {
    let started = Instant::now();
    let out_dir = prepare_out_dir(out_dir)?;
    let base = doc.resolve()?;
    let manifest = RunManifest::new(
        CommandArgs::Sensitivity {
            v0_grid: v0_grid.to_vec(),
            m_grid: m_grid.to_vec(),
            kind,
            fees: fees.to_vec(),
            fee_tol,
        },
        doc,
    )?;

    let fee_mode = if fees.is_empty() {
        FeeMode::Fair { tol: fee_tol }
    } else {
        FeeMode::Given(fees.to_vec())
    };
    let sweep = sensitivity_sweep(&base, v0_grid, m_grid, &fee_mode, kind)?;

    let (header, rows): (Vec<&str>, Vec<Vec<String>>) = match kind {
        SweepKind::Liability => (
            vec![
                "kind",
                "v0",
                "m",
                "c_bar",
                "liability",
                "std_error",
                "n_effective",
                "n_paths",
                "h",
                "seed",
            ],
            sweep
                .iter()
                .map(|row| {
                    let est = row.liability.expect("liability sweep rows carry estimates");
                    vec![
                        "liability".to_string(),
                        sig17(row.v0),
                        sig17(row.m),
                        sig17(row.c_bar),
                        sig17(est.value),
                        sig17(est.std_error),
                        sig17(est.n_effective),
                        base.n_particles.to_string(),
                        sig17(base.h),
                        base.seed.to_string(),
                    ]
                })
                .collect(),
        ),
        SweepKind::LossSummary => (
            vec![
                "kind",
                "v0",
                "m",
                "c_bar",
                "mean",
                "mean_se",
                "variance",
                "variance_se",
                "cte90",
                "cte90_se",
                "n_samples",
                "n_paths",
                "h",
                "seed",
            ],
            sweep
                .iter()
                .map(|row| {
                    let loss = row.loss.expect("loss sweep rows carry summaries");
                    vec![
                        "loss_summary".to_string(),
                        sig17(row.v0),
                        sig17(row.m),
                        sig17(row.c_bar),
                        sig17(loss.mean),
                        sig17(loss.mean_se),
                        sig17(loss.variance),
                        sig17(loss.variance_se),
                        sig17(loss.cte90),
                        sig17(loss.cte90_se),
                        loss.n_samples.to_string(),
                        base.n_particles.to_string(),
                        sig17(base.h),
                        base.seed.to_string(),
                    ]
                })
                .collect(),
        ),
    };
    let n = write_csv(&out_dir.join("sensitivity.csv"), &header, &rows)?;
    finish(
        manifest,
        started,
        vec![OutputFile {
            file: "sensitivity.csv".to_string(),
            rows: n,
        }],
        &out_dir,
    )
}

/// Run the validation battery at the given scale and write `validate.csv`
/// with one row per check. The document's seed (when nonzero) reseeds the
/// battery; its market sections are validated and echoed but the checks pin
/// their own parameter sets, since each check needs a specific regime.
///
/// Returns the report alongside the manifest so the caller can render it
/// and set the exit status.
pub fn cmd_validate(
    doc: &ConfigDoc,
    scale: &ValidationScale,
    full: bool,
    out_dir: &Path,
) -> Result<(RunManifest, ValidationReport), Error> {
    let started = Instant::now();
    let out_dir = prepare_out_dir(out_dir)?;
    doc.resolve()?;
    let manifest = RunManifest::new(CommandArgs::Validate { full }, doc)?;

    let mut scale = scale.clone();
    if doc.sim.seed != 0 {
        scale.seed = doc.sim.seed;
    }
    let report = run_battery(&scale)?;
    let rows: Vec<Vec<String>> = report
        .checks
        .iter()
        .map(|check| {
            vec![
                check.name.to_string(),
                if check.passed { "pass" } else { "fail" }.to_string(),
                check.detail.clone(),
            ]
        })
        .collect();
    let n = write_csv(
        &out_dir.join("validate.csv"),
        &["check", "result", "detail"],
        &rows,
    )?;
    let manifest = finish(
        manifest,
        started,
        vec![OutputFile {
            file: "validate.csv".to_string(),
            rows: n,
        }],
        &out_dir,
    )?;
    Ok((manifest, report))
}

/// Replay a previously written manifest into `out_dir`. The replay runs the
/// stored command with the stored configuration and arguments, so its CSV
/// tables are byte-identical to the original run's.
pub fn cmd_rerun(manifest: &RunManifest, out_dir: &Path) -> Result<RunManifest, Error> {
    let doc = &manifest.config;
    match &manifest.args {
        CommandArgs::FairFee { m_list, fee_tol } => {
            cmd_fair_fee(doc, m_list, *fee_tol, out_dir)
        }
        CommandArgs::NetLiability => cmd_net_liability(doc, out_dir),
        CommandArgs::LossDist => cmd_loss_dist(doc, out_dir),
        CommandArgs::Sensitivity {
            v0_grid,
            m_grid,
            kind,
            fees,
            fee_tol,
        } => cmd_sensitivity(doc, v0_grid, m_grid, *kind, fees, *fee_tol, out_dir),
        CommandArgs::Validate { full } => {
            let scale = if *full {
                ValidationScale::full()
            } else {
                ValidationScale::default()
            };
            cmd_validate(doc, &scale, *full, out_dir).map(|(manifest, _)| manifest)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::ContractSpec;
    use crate::params::{FeeStructure, MarketParams, RiskPremia};
    use crate::pricing::SimConfig;

    fn small_doc() -> ConfigDoc {
        let config = SimConfig::risk_neutral(
            MarketParams::benchmark(),
            FeeStructure {
                q: 0.0075,
                c_bar: 0.02,
                m: 0.0,
            },
            ContractSpec::constant(10.0, 10.0),
            1.0 / 50.0,
            600,
            31,
        );
        ConfigDoc::from_sim_config(&config)
    }

    fn read(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    #[test]
    fn fair_fee_writes_one_row_per_multiplier() {
        // The short toy contract has no root inside the default bracket, so
        // this test prices the standard long-dated one at coarse settings.
        let mut doc = small_doc();
        doc.contract = crate::config::ContractSection {
            f0: 100.0,
            withdrawal_schedule: ContractSpec::constant(100.0, 7.0).withdrawals,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = cmd_fair_fee(&doc, &[0.0, 0.3], 1e-3, dir.path()).unwrap();
        assert_eq!(manifest.outputs.len(), 1);
        assert_eq!(manifest.outputs[0].rows, 2);
        let text = read(&dir.path().join("fair_fee.csv"));
        assert!(text.starts_with("m,c_bar_star_pct,std_error,n_paths,h,seed\r\n"));
        assert_eq!(text.trim_end().lines().count(), 3);
        assert!(dir.path().join("fair_fee_manifest.json").exists());
    }

    #[test]
    fn fair_fee_rejects_an_empty_multiplier_list() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_fair_fee(&small_doc(), &[], 1e-3, dir.path()).unwrap_err();
        assert!(err.to_string().contains("m_list is empty"));
    }

    #[test]
    fn net_liability_writes_table_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cmd_net_liability(&small_doc(), dir.path()).unwrap();
        assert_eq!(manifest.outputs[0].rows, 1);
        let text = read(&dir.path().join("net_liability.csv"));
        assert!(text.starts_with("v0,m,c_bar,liability,std_error,"));
    }

    #[test]
    fn loss_dist_writes_samples_and_summary() {
        let mut doc = small_doc();
        doc.sim.measure = Measure::RealWorld;
        doc.premia = Some(RiskPremia {
            eta_s: 0.6667,
            eta_v: -2.0,
            eta_j: 1.1414e-3,
        });
        let dir = tempfile::tempdir().unwrap();
        let manifest = cmd_loss_dist(&doc, dir.path()).unwrap();
        assert_eq!(manifest.outputs.len(), 2);
        assert_eq!(manifest.outputs[0].rows, 600);
        let summary = read(&dir.path().join("loss_summary.csv"));
        assert!(summary.starts_with("mean,mean_se,variance,"));
        assert!(manifest.real_world.is_some());
    }

    #[test]
    fn sensitivity_with_given_fees_covers_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = cmd_sensitivity(
            &small_doc(),
            &[0.02, 0.04],
            &[0.0, 0.3],
            SweepKind::Liability,
            &[0.02, 0.015],
            1e-3,
            dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.outputs[0].rows, 4);
        let text = read(&dir.path().join("sensitivity.csv"));
        assert!(text.starts_with("kind,v0,m,c_bar,liability,"));
    }

    #[test]
    fn rerun_reproduces_csv_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let manifest = cmd_net_liability(&small_doc(), dir_a.path()).unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let replay = cmd_rerun(&manifest, dir_b.path()).unwrap();
        assert_eq!(manifest.outputs, replay.outputs);
        assert_eq!(
            read(&dir_a.path().join("net_liability.csv")),
            read(&dir_b.path().join("net_liability.csv"))
        );
    }
}

//! Command-line front end. All real work lives in the library's command
//! layer; this binary parses flags, sizes the thread pool, and turns errors
//! into a machine-readable record on stderr.
//!
//! Exit codes: 0 success, 1 error (bad input, I/O, solver failure),
//! 2 validation battery ran but at least one check failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gmwb_engine::commands::{
    cmd_fair_fee, cmd_loss_dist, cmd_net_liability, cmd_rerun, cmd_sensitivity, cmd_validate,
};
use gmwb_engine::config::ConfigDoc;
use gmwb_engine::output::RunManifest;
use gmwb_engine::pricing::DEFAULT_FEE_TOL;
use gmwb_engine::risk::SweepKind;
use gmwb_engine::validate::ValidationScale;
use gmwb_engine::Error;

#[derive(Parser)]
#[command(
    name = "gmwb",
    version,
    about = "Monte Carlo pricing and tail risk for GMWB contracts with volatility-linked fees"
)]
struct Cli {
    /// JSON configuration document (required by every command except rerun).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed in the configuration document.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for CSV tables and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads; 0 uses every core. Thread count never changes
    /// numerical results, only wall time.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fair base rider fee for each multiplier.
    FairFee {
        /// Comma-separated VIX-fee multipliers, e.g. 0,0.1,0.2,0.3.
        #[arg(long, value_delimiter = ',', required = true)]
        m_list: Vec<f64>,
        /// Bisection tolerance on the fee, per year.
        #[arg(long, default_value_t = DEFAULT_FEE_TOL)]
        fee_tol: f64,
    },
    /// Price the guarantee at the configured fee.
    NetLiability,
    /// Real-world loss samples and summary statistics.
    LossDist,
    /// Tabulate liability or loss statistics over v0 and multiplier grids.
    Sensitivity {
        /// Comma-separated initial variances.
        #[arg(long, value_delimiter = ',', required = true)]
        v0_grid: Vec<f64>,
        /// Comma-separated multipliers.
        #[arg(long, value_delimiter = ',', required = true)]
        m_grid: Vec<f64>,
        #[arg(long, value_enum, default_value_t = KindArg::Liability)]
        kind: KindArg,
        /// Presolved base fees pairing positionally with the multiplier
        /// grid; omit to solve a fair fee per multiplier.
        #[arg(long, value_delimiter = ',')]
        fees: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_FEE_TOL)]
        fee_tol: f64,
    },
    /// Run the validation battery and report pass/fail per check.
    Validate {
        /// Heavyweight scale (larger ensembles, finer reference step).
        #[arg(long)]
        full: bool,
    },
    /// Replay a run manifest; reproduces its CSV tables byte for byte.
    Rerun {
        /// Path to a previously written manifest.
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Liability,
    LossSummary,
}

impl From<KindArg> for SweepKind {
    fn from(kind: KindArg) -> SweepKind {
        match kind {
            KindArg::Liability => SweepKind::Liability,
            KindArg::LossSummary => SweepKind::LossSummary,
        }
    }
}

fn load_doc(cli: &Cli) -> Result<ConfigDoc, Error> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Error::Config("--config PATH is required for this command".to_string())
    })?;
    let mut doc = ConfigDoc::from_path(path)?;
    if let Some(seed) = cli.seed {
        doc.sim.seed = seed;
    }
    Ok(doc)
}

fn report_outputs(manifest: &RunManifest, out: &std::path::Path) {
    for output in &manifest.outputs {
        println!("wrote {} ({} rows)", out.join(&output.file).display(), output.rows);
    }
    println!(
        "wrote {}",
        out.join(format!("{}_manifest.json", manifest.args.name()))
            .display()
    );
}

fn run(cli: &Cli) -> Result<u8, Error> {
    match &cli.command {
        Command::FairFee { m_list, fee_tol } => {
            let doc = load_doc(cli)?;
            let manifest = cmd_fair_fee(&doc, m_list, *fee_tol, &cli.out)?;
            report_outputs(&manifest, &cli.out);
            Ok(0)
        }
        Command::NetLiability => {
            let doc = load_doc(cli)?;
            let manifest = cmd_net_liability(&doc, &cli.out)?;
            report_outputs(&manifest, &cli.out);
            Ok(0)
        }
        Command::LossDist => {
            let doc = load_doc(cli)?;
            let manifest = cmd_loss_dist(&doc, &cli.out)?;
            report_outputs(&manifest, &cli.out);
            Ok(0)
        }
        Command::Sensitivity {
            v0_grid,
            m_grid,
            kind,
            fees,
            fee_tol,
        } => {
            let doc = load_doc(cli)?;
            let manifest = cmd_sensitivity(
                &doc,
                v0_grid,
                m_grid,
                (*kind).into(),
                fees,
                *fee_tol,
                &cli.out,
            )?;
            report_outputs(&manifest, &cli.out);
            Ok(0)
        }
        Command::Validate { full } => {
            let doc = load_doc(cli)?;
            let scale = if *full {
                ValidationScale::full()
            } else {
                ValidationScale::default()
            };
            let (manifest, report) = cmd_validate(&doc, &scale, *full, &cli.out)?;
            print!("{}", report.render());
            report_outputs(&manifest, &cli.out);
            Ok(if report.passed() { 0 } else { 2 })
        }
        Command::Rerun { manifest } => {
            let stored = RunManifest::from_path(manifest)?;
            let replay = cmd_rerun(&stored, &cli.out)?;
            report_outputs(&replay, &cli.out);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Build the global pool before any parallel work. Failure here means
        // it was already built, which cannot happen in this single-dispatch
        // binary.
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!(
                "{}",
                serde_json::json!({ "error": "threads", "message": e.to_string() })
            );
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "message": e.to_string() })
            );
            ExitCode::from(1)
        }
    }
}

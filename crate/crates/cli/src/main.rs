//! `rbl`: run, validate and bound rigid-body localization experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbl_core::harness::{crlb_table, emit_outputs, run_experiment, ExperimentConfig, HarnessError};

#[derive(Debug, Parser)]
#[command(
    name = "rbl",
    version,
    about = "Rigid-body localization Monte Carlo experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (estimator, σ, trial) cell and write trials.csv, summary.json and plotdata/.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config; defaults to ./rbl-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, env = "RBL_WORKERS")]
        workers: Option<usize>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config and list every problem found.
    Validate { config: PathBuf },
    /// Print the Cramér–Rao bound for every σ level as JSON.
    Crlb { config: PathBuf },
}

const EXIT_IO: u8 = 1;
const EXIT_INVALID: u8 = 2;

fn exit_code(e: &HarnessError) -> ExitCode {
    match e {
        HarnessError::Io { .. } | HarnessError::Runtime(_) => ExitCode::from(EXIT_IO),
        HarnessError::Parse(_) | HarnessError::Validation(_) => ExitCode::from(EXIT_INVALID),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    ExperimentConfig::from_json(&text)
}

fn run(
    config: &Path,
    out: Option<PathBuf>,
    workers: Option<usize>,
    seed: Option<u64>,
) -> Result<(), HarnessError> {
    let mut cfg = load(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let dir = out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("rbl-out"));
    let workers = workers
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let output = run_experiment(&cfg, workers)?;
    let paths = emit_outputs(&output, &dir)?;
    let failed = output.trials.iter().filter(|t| t.error.is_some()).count();
    eprintln!(
        "{} trials ({failed} failed) in {} cells -> {}",
        output.trials.len(),
        output.summary.cells.len(),
        paths.summary.parent().unwrap_or(&dir).display()
    );
    Ok(())
}

fn validate(config: &Path) -> Result<(), HarnessError> {
    let cfg = load(config)?;
    let (e, s, t) = (cfg.estimators.len(), cfg.noise.sigmas.len(), cfg.trials);
    println!(
        "ok: {e} estimators x {s} sigma levels x {t} trials = {} trials",
        e * s * t
    );
    Ok(())
}

fn crlb(config: &Path) -> Result<(), HarnessError> {
    let cfg = load(config)?;
    let rows: Vec<serde_json::Value> = crlb_table(&cfg)?
        .into_iter()
        .map(|(sigma, r)| match r {
            Ok(b) => serde_json::json!({
                "sigma": sigma,
                "angle": b.angle,
                "translation": b.translation,
                "node_rmse": b.node_rmse,
            }),
            Err(e) => serde_json::json!({ "sigma": sigma, "error": e }),
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&rows).expect("rows serialise")
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            workers,
            seed,
        } => run(&config, out, workers, seed),
        Command::Validate { config } => validate(&config),
        Command::Crlb { config } => crlb(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

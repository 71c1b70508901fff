//! `detect`: end-to-end pipeline over inertial activity recordings.
//! simulate a synthetic cohort, preprocess recordings into windows, train the
//! window classifier on pre-treatment data, evaluate the per-patient
//! treatment effect scores, and render reports from measured outcomes.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use detect_core::eval::NrsPredicate;

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "detect", version, about = "Treatment-effect scoring from activity classification accuracy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patient cohort as recording CSVs plus nrs.csv.
    Simulate {
        /// Cohort spec file; omit for the built-in 8-patient cohort.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for the cohort files.
        #[arg(long)]
        out: PathBuf,
        /// Master seed (default 42).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trim, segment, and cache recordings as a window set.
    Preprocess {
        /// Recording CSV file or directory.
        #[arg(long)]
        data: PathBuf,
        /// Output cache file.
        #[arg(long)]
        out: PathBuf,
        /// Seconds trimmed from each end of every recording.
        #[arg(long, default_value_t = 2.5)]
        trim: f64,
        /// Window length in samples.
        #[arg(long, default_value_t = 100)]
        window: usize,
        /// Step between window starts in samples.
        #[arg(long, default_value_t = 50)]
        step: usize,
    },
    /// Train the classifier on pooled pre-treatment windows.
    Train {
        /// Recording directory or a `.cache` window set.
        #[arg(long)]
        data: PathBuf,
        /// Run config file (flat key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained bundle.
        #[arg(long, default_value = "model.bundle")]
        out: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score every patient: held-out pre-treatment accuracy versus
    /// post-treatment accuracy, threshold calibration, significance flags.
    Evaluate {
        /// Trained bundle file.
        #[arg(long)]
        bundle: PathBuf,
        /// Recording directory (both phases).
        #[arg(long)]
        data: PathBuf,
        /// NRS file (default <data>/nrs.csv).
        #[arg(long)]
        nrs: Option<PathBuf>,
        /// Report output directory.
        #[arg(long)]
        out: PathBuf,
        /// Run config file (flat key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// NRS improvement predicate: and | or.
        #[arg(long)]
        nrs_predicate: Option<String>,
    },
    /// Rebuild report files from measured per-patient outcomes.
    Report {
        /// CSV of patient_id,acc_pre,acc_post,nrs_pre,nrs_post rows.
        #[arg(long)]
        outcomes: PathBuf,
        /// Report output directory.
        #[arg(long)]
        out: PathBuf,
        /// NRS improvement predicate: and | or.
        #[arg(long)]
        nrs_predicate: Option<String>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::from_file(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn parse_predicate(s: Option<&str>, fallback: NrsPredicate) -> Result<NrsPredicate, CliError> {
    match s {
        None => Ok(fallback),
        Some(v) => NrsPredicate::parse(v)
            .ok_or_else(|| CliError::Usage(format!("bad --nrs-predicate \"{v}\" (and|or)"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { spec, out, seed } => {
            commands::cmd_simulate(spec.as_deref(), &out, seed)
        }
        Command::Preprocess {
            data,
            out,
            trim,
            window,
            step,
        } => commands::cmd_preprocess(&data, &out, trim, window, step),
        Command::Train {
            data,
            config,
            out,
            seed,
            epochs,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(seed) = seed {
                cfg.override_seed(seed);
            }
            if let Some(epochs) = epochs {
                cfg.epochs = epochs;
            }
            commands::cmd_train(&data, &cfg, &out)
        }
        Command::Evaluate {
            bundle,
            data,
            nrs,
            out,
            config,
            nrs_predicate,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.nrs_predicate = parse_predicate(nrs_predicate.as_deref(), cfg.nrs_predicate)?;
            commands::cmd_evaluate(&bundle, &data, nrs.as_deref(), &out, &cfg)
        }
        Command::Report {
            outcomes,
            out,
            nrs_predicate,
        } => {
            let predicate = parse_predicate(nrs_predicate.as_deref(), NrsPredicate::And)?;
            commands::cmd_report(&outcomes, &out, predicate)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

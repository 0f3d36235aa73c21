//! `eit-dipole` command-line tool.
//!
//! Every subcommand reads an optional JSON configuration (`--config`), writes
//! its results into `--out` and embeds a provenance block (config hash, seed,
//! version) in each JSON file. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure (diagnostics in `error.json`).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eit_dipole::EitError;
use serde_json::json;

use commands::{Ctx, Model};
use config::RunConfig;
use output::{Format, Provenance, Sink};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical { message: String, diagnostic: serde_json::Value },
    Io(String),
}

impl From<EitError> for CliError {
    fn from(e: EitError) -> Self {
        match e {
            EitError::InvalidAnomaly(_)
            | EitError::InvalidDesign(_)
            | EitError::InvalidData(_)
            | EitError::InvalidParameter(_) => CliError::Config(e.to_string()),
            other => CliError::Numerical { message: other.to_string(), diagnostic: json!({ "error": format!("{other:?}") }) },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eit-dipole", version, about = "Dipole-measurement EIT for a small elliptical anomaly")]
struct Cli {
    /// Master random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Boundary data for the configured anomaly and design.
    Forward {
        /// Forward maps to evaluate; the first also feeds `measurements.json`.
        #[arg(long, value_enum, num_args = 1.., default_values = ["ellipse"])]
        model: Vec<Model>,
        /// Also integrate the exact kernel over the ellipse; the data file then uses it.
        #[arg(long)]
        exact: bool,
    },
    /// Dipole potential and log10 kernel over the unit disc.
    FieldGrid,
    /// Centre and area from three measurements.
    Invert {
        /// MeasurementSet JSON; simulated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Jacobians, determinant identity and the inverse-norm bound.
    Stability,
    /// Expected-information-gain surface over symmetric designs.
    OedBayes,
    /// Reciprocal-condition-number surface over symmetric designs.
    OedDet,
    /// Metropolis-Hastings posterior of (A, b1, b2).
    Posterior {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Five-parameter Newton recovery.
    Newton {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Noisy recovery experiment over all noise levels and seeds.
    Table2,
    /// Optimal spread under both design criteria as the prior mean moves.
    CompareDesigns,
    /// Reference quadrature values.
    Oracle {
        #[command(subcommand)]
        action: OracleAction,
    },
}

#[derive(Debug, Subcommand)]
enum OracleAction {
    /// Recompute and write the regression constants.
    Freeze,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Forward { .. } => "forward",
            Command::FieldGrid => "field-grid",
            Command::Invert { .. } => "invert",
            Command::Stability => "stability",
            Command::OedBayes => "oed-bayes",
            Command::OedDet => "oed-det",
            Command::Posterior { .. } => "posterior",
            Command::Newton { .. } => "newton",
            Command::Table2 => "table2",
            Command::CompareDesigns => "compare-designs",
            Command::Oracle { .. } => "oracle freeze",
        }
    }

    fn data(&self) -> Option<&std::path::Path> {
        match self {
            Command::Invert { data } | Command::Posterior { data } | Command::Newton { data } => data.as_deref(),
            _ => None,
        }
    }
}

fn run(cli: &Cli, sink: &mut Sink, config: &RunConfig, seed: u64) -> Result<(), CliError> {
    let ctx = Ctx { config, seed, format: cli.format, data: cli.command.data() };
    match &cli.command {
        Command::Forward { model, exact } => commands::forward(&ctx, sink, model, *exact),
        Command::FieldGrid => commands::field_grid(&ctx, sink),
        Command::Invert { .. } => commands::invert(&ctx, sink),
        Command::Stability => commands::stability(&ctx, sink),
        Command::OedBayes => commands::oed_bayes(&ctx, sink),
        Command::OedDet => commands::oed_det(&ctx, sink),
        Command::Posterior { .. } => commands::posterior(&ctx, sink),
        Command::Newton { .. } => commands::newton(&ctx, sink),
        Command::Table2 => commands::table2(&ctx, sink),
        Command::CompareDesigns => commands::compare(&ctx, sink),
        Command::Oracle { action: OracleAction::Freeze } => commands::oracle_freeze(&ctx, sink),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match cli.config.as_deref().map(RunConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => return report(e, None),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let provenance = Provenance::new(cli.command.name(), seed, &config);
    let mut sink = match Sink::new(&cli.out, provenance) {
        Ok(s) => s,
        Err(e) => return report(e, None),
    };
    match run(&cli, &mut sink, &config, seed) {
        Ok(()) => {
            for path in &sink.written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(e, Some(&mut sink)),
    }
}

fn report(e: CliError, sink: Option<&mut Sink>) -> ExitCode {
    match e {
        CliError::Config(msg) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        CliError::Numerical { message, diagnostic } => {
            let doc = json!({ "message": message, "diagnostic": diagnostic });
            eprintln!("numerical failure: {message}");
            if let Some(sink) = sink {
                if let Err(CliError::Io(w)) = sink.json("error.json", &doc) {
                    eprintln!("{w}");
                }
            }
            ExitCode::from(3)
        }
        CliError::Io(msg) => {
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

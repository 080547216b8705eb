//! Command line workflows for bivariate ensemble calibration.
//!
//! `generate` writes synthetic datasets, `calibrate` fits one post-processing
//! method over rolling training windows and scores every evaluation case,
//! `verify` aggregates the scored cases into a verification report, and
//! `compare` renders several reports side by side.

mod commands;
mod files;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Post-processing method applied by `calibrate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    /// Mixture model with per-group location maps.
    BmaFull,
    /// Mixture model with one shared location map.
    BmaPars,
    /// Gaussian copula over univariate margins.
    Copula,
    /// The raw ensemble, unprocessed.
    Raw,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::BmaFull => "bma_full",
            Method::BmaPars => "bma_pars",
            Method::Copula => "copula",
            Method::Raw => "raw",
        })
    }
}

#[derive(Parser)]
#[command(
    name = "bivar-calib",
    about = "Joint calibration of ensemble wind speed and temperature forecasts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Generate {
        /// Output CSV path; the manifest sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        stations: usize,
        #[arg(long, default_value_t = 400)]
        days: usize,
        #[arg(long, default_value_t = 8)]
        members: usize,
        /// Ensemble spread over observation-error spread.
        #[arg(long, default_value_t = 0.4)]
        dispersion: f64,
        /// Wind-temperature correlation of the observations.
        #[arg(long, default_value_t = 0.12)]
        truth_corr: f64,
        #[arg(long, default_value_t = 0.5)]
        bias_wind: f64,
        #[arg(long, default_value_t = -1.0)]
        bias_temp: f64,
        /// Member grouping recorded in the manifest.
        #[arg(long, default_value = "uwme8")]
        grouping: String,
        #[arg(long, default_value = "2020-01-01")]
        start_date: chrono::NaiveDate,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a method over rolling windows and score the evaluation cases.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Override the manifest's member grouping.
        #[arg(long)]
        grouping: Option<String>,
        #[arg(long, default_value_t = 40)]
        training_days: u32,
        #[arg(long, default_value_t = 10000)]
        mc_samples: usize,
        /// Restrict evaluation to target dates at or after this date.
        #[arg(long)]
        eval_start: Option<chrono::NaiveDate>,
        /// Restrict evaluation to target dates at or before this date.
        #[arg(long)]
        eval_end: Option<chrono::NaiveDate>,
        /// First target date of the latent-correlation period (copula only).
        #[arg(long)]
        corr_start: Option<chrono::NaiveDate>,
        /// Last target date of the latent-correlation period (copula only).
        #[arg(long)]
        corr_end: Option<chrono::NaiveDate>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate a calibration run's predictions into a report.
    Verify {
        /// The calibrate run directory (report lands here too).
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Render one or more verification reports side by side.
    Compare {
        /// Report JSON files.
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            out,
            stations,
            days,
            members,
            dispersion,
            truth_corr,
            bias_wind,
            bias_temp,
            grouping,
            start_date,
            seed,
        } => commands::generate(commands::GenerateArgs {
            out,
            stations,
            days,
            members,
            dispersion,
            truth_corr,
            bias: [bias_wind, bias_temp],
            grouping,
            start_date,
            seed,
        }),
        Command::Calibrate {
            dataset,
            method,
            grouping,
            training_days,
            mc_samples,
            eval_start,
            eval_end,
            corr_start,
            corr_end,
            output,
            seed,
        } => commands::calibrate(commands::CalibrateArgs {
            dataset,
            method,
            grouping,
            training_days,
            mc_samples,
            eval_start,
            eval_end,
            corr_start,
            corr_end,
            output,
            seed,
        }),
        Command::Verify { output, dataset } => commands::verify(&output, &dataset),
        Command::Compare { reports, csv } => commands::compare(&reports, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

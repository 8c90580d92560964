//! `hfpredict`: train and sweep attention/LSTM predictors over clinical
//! death-count series.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 when the run
//! contains diverged cells.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use hfpredict_core::data::{generate_synthetic, load_csv, write_csv, Feature};
use hfpredict_core::harness::{
    emit_feature_aggregates, run_sweep, BinWidths, ModelKind, RunReport, SweepConfig,
};
use hfpredict_core::optim::OptimKind;
use hfpredict_core::verify::run_gradient_verification;

/// Environment variable supplying the default master seed; a `--seed` flag
/// always wins over it.
const SEED_ENV: &str = "HFPREDICT_SEED";

#[derive(Parser)]
#[command(
    name = "hfpredict",
    version,
    about = "Heart-failure count prediction: attention and LSTM sequence models \
             swept over optimizers and learning rates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full sweep described by a JSON config file.
    Sweep {
        /// Path to the JSON sweep configuration.
        #[arg(long)]
        config: PathBuf,
        /// Master seed; overrides the config file and the environment.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a single grid cell and emit its artifacts.
    Train {
        /// attention | lstm
        #[arg(long)]
        model: String,
        /// sgd | rmsprop | adam | adadelta
        #[arg(long)]
        optimizer: String,
        #[arg(long)]
        lr: f64,
        /// age | serum_creatinine | ejection_fraction
        #[arg(long)]
        feature: String,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Clinical CSV to load (mutually exclusive with --synthetic).
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Generate a schema-compatible dataset instead of reading a file.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 299)]
        synthetic_n: usize,
        #[arg(long, default_value_t = 5)]
        lookback: usize,
        /// Override the feature's default bin width.
        #[arg(long)]
        bin_width: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Emit the binned death-count series for one feature (whole-dataset
    /// and train-split variants).
    Aggregate {
        /// age | serum_creatinine | ejection_fraction
        #[arg(long)]
        feature: String,
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 299)]
        synthetic_n: usize,
        #[arg(long)]
        bin_width: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        split_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also export the loaded or generated records as CSV.
        #[arg(long)]
        export_records: Option<PathBuf>,
    },
    /// Run the gradient verification suite and print the worst error.
    Gradcheck {
        /// Seeded random instances per operation group.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Re-render the ranking tables from a stored report.
    Report {
        /// Output directory of a previous sweep (contains report.json).
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => {
            let seed = raw
                .parse::<u64>()
                .map_err(|_| anyhow!("{SEED_ENV}={raw} is not a valid seed"))?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sweep { config, seed } => {
            let mut sweep = SweepConfig::from_json_file(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            sweep.master_seed = seed.or(sweep.master_seed).or(env_seed()?);
            execute_sweep(&sweep)
        }
        Command::Train {
            model,
            optimizer,
            lr,
            feature,
            epochs,
            seed,
            data,
            synthetic,
            synthetic_n,
            lookback,
            bin_width,
            out,
        } => {
            let model: ModelKind = model.parse().map_err(|e: String| anyhow!(e))?;
            let optimizer: OptimKind = optimizer.parse().map_err(|e: String| anyhow!(e))?;
            let feature: Feature = feature.parse().map_err(|e: String| anyhow!(e))?;
            let mut bin_widths = BinWidths::default();
            if let Some(width) = bin_width {
                match feature {
                    Feature::Age => bin_widths.age = width,
                    Feature::SerumCreatinine => bin_widths.serum_creatinine = width,
                    Feature::EjectionFraction => bin_widths.ejection_fraction = width,
                }
            }
            let sweep = SweepConfig {
                dataset: data,
                synthetic,
                synthetic_n,
                features: vec![feature],
                models: vec![model],
                optimizers: vec![optimizer],
                learning_rates: vec![lr],
                epochs,
                lookback,
                bin_widths,
                master_seed: seed.or(env_seed()?),
                output_dir: out,
                parallelism: 1,
                ..SweepConfig::default()
            };
            execute_sweep(&sweep)
        }
        Command::Aggregate {
            feature,
            data,
            synthetic,
            synthetic_n,
            bin_width,
            split_fraction,
            seed,
            out,
            export_records,
        } => {
            let feature: Feature = feature.parse().map_err(|e: String| anyhow!(e))?;
            if data.is_none() && !synthetic {
                return Err(anyhow!("pass either --data <csv> or --synthetic"));
            }
            let seed = seed
                .or(env_seed()?)
                .unwrap_or(hfpredict_core::harness::DEFAULT_MASTER_SEED);
            let records = match &data {
                Some(path) => load_csv(path).with_context(|| format!("loading {}", path.display()))?,
                None => generate_synthetic(synthetic_n, seed)?,
            };
            if let Some(path) = export_records {
                write_csv(&path, &records)?;
                println!("records exported to {}", path.display());
            }
            let width = bin_width.unwrap_or_else(|| feature.default_bin_width());
            let (all, train) =
                emit_feature_aggregates(&records, feature, width, split_fraction, seed, &out)?;
            println!("wrote {}", all.display());
            println!("wrote {}", train.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { instances } => {
            let started = Instant::now();
            let report = run_gradient_verification(instances)?;
            for group in &report.groups {
                println!(
                    "  {:<32} max rel err {:>12.3e}  (tolerance {:.0e})  {}",
                    group.name,
                    group.max_relative_error,
                    group.tolerance,
                    if group.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "max relative error {:.3e} over {} groups x {} instances in {:.2?}",
                report.max_relative_error(),
                report.groups.len(),
                report.instances_per_group,
                started.elapsed()
            );
            if report.passed() {
                println!("gradient check passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check FAILED");
                Ok(ExitCode::from(1))
            }
        }
        Command::Report { dir } => {
            let report = RunReport::read(&dir)
                .with_context(|| format!("reading report.json in {}", dir.display()))?;
            print!("{report}");
            if report.has_diverged_cells() {
                eprintln!("note: report contains diverged cells");
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

fn execute_sweep(config: &SweepConfig) -> Result<ExitCode> {
    let started = Instant::now();
    let report = run_sweep(config)?;
    print!("{report}");
    println!(
        "{} cells in {:.1?}; artifacts under {}",
        report.cells.len(),
        started.elapsed(),
        config.output_dir.display()
    );
    if report.has_diverged_cells() {
        eprintln!("note: some cells diverged; see report.json");
        Ok(ExitCode::from(2))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

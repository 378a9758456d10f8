//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 config error, 1 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coughfs::dataset;
use coughfs::experiment::{run_experiment, DatasetSource, ExperimentConfig, ExperimentError};
use coughfs::stats;
use coughfs::synth;

#[derive(Debug, Parser)]
#[command(name = "coughfs", version, about = "Few-shot audio classification studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a study from a JSON config.
    Run {
        /// JSON config; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides the config).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Base seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Use generated synthetic data instead of the configured dataset.
        #[arg(long)]
        synthetic: bool,
    },
    /// Write synthetic clips as `<dir>/<class>/<n>.wav`.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two per-episode accuracy CSVs (header `accuracy_pct`).
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        margin: f64,
        #[arg(long, default_value_t = 0.90)]
        confidence: f64,
        #[arg(long, default_value_t = stats::DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            output,
            seed,
            synthetic,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None if synthetic => ExperimentConfig::default(),
                None => return Err(Failure::Config("either --config or --synthetic is required".into())),
            };
            if synthetic && !matches!(cfg.dataset, DatasetSource::Synthetic { .. }) {
                cfg.dataset = ExperimentConfig::default().dataset;
            }
            if let Some(dir) = output {
                cfg.output = dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_experiment(&cfg)?;
            for r in &report.runs {
                eprintln!(
                    "{:<40} K={:<3} accuracy {:.2}% ± {:.2}",
                    r.task, r.k, r.summary.mean_accuracy, r.summary.std_error
                );
            }
            if let Some(s) = &report.stats {
                eprintln!(
                    "TOST: diff {:.2}, CI [{:.2}, {:.2}] → {}",
                    s.tost.mean_diff, s.tost.ci_low, s.tost.ci_high, s.tost.verdict
                );
            }
            eprintln!("report written to {}", report.output.display());
            Ok(())
        }
        Command::Synth {
            output,
            per_class,
            seed,
        } => {
            if per_class == 0 {
                return Err(Failure::Config("--per-class must be positive".into()));
            }
            let pool = synth::generate_pool(&synth::default_classes(), per_class, seed)
                .map_err(|e| Failure::Config(e.to_string()))?;
            dataset::persist_pool(&pool, &output).map_err(|e| Failure::Runtime(e.to_string()))?;
            eprintln!("wrote {} clips to {}", pool.len(), output.display());
            Ok(())
        }
        Command::Compare {
            a,
            b,
            margin,
            confidence,
            resamples,
            seed,
        } => {
            let read = |p: &PathBuf| stats::read_accuracy_csv(p).map_err(|e| Failure::Config(e.to_string()));
            let (a, b) = (read(&a)?, read(&b)?);
            let cfg_err = |e: stats::StatsError| Failure::Config(e.to_string());
            let tost = stats::tost_equivalence(&a, &b, margin, confidence).map_err(cfg_err)?;
            let boot =
                stats::bootstrap_equivalence(&a, &b, margin, resamples, confidence, seed).map_err(cfg_err)?;
            let json = serde_json::json!({ "tost": tost, "bootstrap": boot });
            println!("{}", serde_json::to_string_pretty(&json).expect("serializable"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    coughfs::retain_freed_memory();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

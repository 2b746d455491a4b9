//! Batch experiment driver: generate synthetic datasets, train velocity
//! fields, sample trajectories, evaluate predictions, and sweep ablation
//! grids. All randomness flows from explicit seeds; identical invocations
//! produce identical artifact payloads.

mod pipeline;
mod runspec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use contextflow::error::Error;
use contextflow::sampler::{IntegrationConfig, IntegrationMethod};

use runspec::{MetricKind, SamplingMode, TrainOverrides};

#[derive(Parser)]
#[command(name = "contextflow", version, about = "Spatially informed trajectory inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic longitudinal dataset.
    Generate {
        /// Synthetic-data config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the manifest and slice CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a velocity field and write a checkpoint plus training log.
    Train {
        /// Dataset manifest JSON.
        #[arg(long)]
        dataset: PathBuf,
        /// Run config JSON; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Forbidden-transition rules JSON; enables coupling diagnostics.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Integrate a trained field to a target time and write the predicted slice.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sampling mode: ivp or next-step.
        #[arg(long, default_value = "next-step")]
        mode: String,
        /// Target slice index.
        #[arg(long)]
        target: usize,
        /// Integration steps per unit time.
        #[arg(long)]
        steps: Option<usize>,
        /// Integration method: euler or rk4.
        #[arg(long)]
        method: Option<String>,
        /// Held-out slice indices (unavailable as next-step sources).
        #[arg(long, value_delimiter = ',')]
        holdout: Option<Vec<usize>>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted slice against the ground truth.
    Evaluate {
        /// Predicted slice CSV (from the sample command).
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Ground-truth slice index.
        #[arg(long)]
        target: usize,
        /// Metrics to compute (comma separated): w2, weighted-w2, mmd, energy, kl.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Held-out slice indices (excluded from the classifier reference).
        #[arg(long, value_delimiter = ',')]
        holdout: Option<Vec<usize>>,
        /// Subsampling seed for the Wasserstein estimate.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output metrics JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep coupling mode x lambda x alpha x epsilon over seeds.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        /// Run config JSON with an `ablate` grid.
        #[arg(long)]
        config: PathBuf,
        /// Forbidden-transition rules JSON; enables coupling diagnostics.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Output directory for per-cell results and the aggregate table.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

fn error_category(err: &Error) -> &'static str {
    match err {
        Error::ShapeMismatch { .. } | Error::IndexOutOfRange { .. } => "shape",
        Error::InvalidParameter { .. } | Error::InvalidMarginal { .. } => "config",
        Error::NonFinite { .. } | Error::Diverged(_) | Error::DegenerateKernel(_) => "numeric",
        Error::DegeneratePlan(_) | Error::PriorTooSharp { .. } => "numeric",
        Error::EmptySlice
        | Error::MissingLrFeatures
        | Error::MissingLabels
        | Error::InsufficientData(_) => "data",
        Error::ProblemTooLarge { .. } => "size",
        Error::Schema { .. } | Error::Json(_) => "schema",
        Error::VersionMismatch { .. } | Error::ChecksumMismatch { .. } => "format",
        Error::Io(_) => "io",
    }
}

fn run(cli: Cli) -> contextflow::error::Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            pipeline::cmd_generate(config.as_deref(), seed, &out)
        }
        Command::Train {
            dataset,
            config,
            rules,
            out,
            overrides,
        } => pipeline::cmd_train(
            &dataset,
            config.as_deref(),
            &overrides,
            rules.as_deref(),
            &out,
        ),
        Command::Sample {
            checkpoint,
            dataset,
            mode,
            target,
            steps,
            method,
            holdout,
            out,
        } => {
            let mode: SamplingMode = mode.parse()?;
            let mut integration = IntegrationConfig::default();
            if let Some(steps) = steps {
                integration.steps_per_unit_time = steps;
            }
            if let Some(method) = method {
                integration.method = match method.as_str() {
                    "euler" => IntegrationMethod::Euler,
                    "rk4" => IntegrationMethod::Rk4,
                    _ => {
                        return Err(Error::InvalidParameter {
                            name: "method",
                            message: "expected euler or rk4",
                            value: f64::NAN,
                        })
                    }
                };
            }
            pipeline::cmd_sample(
                &checkpoint,
                &dataset,
                mode,
                target,
                &integration,
                &holdout.unwrap_or_default(),
                &out,
            )
        }
        Command::Evaluate {
            predicted,
            dataset,
            target,
            metrics,
            holdout,
            seed,
            out,
        } => {
            let metrics: Vec<MetricKind> = match metrics {
                Some(names) => names
                    .iter()
                    .map(|n| n.parse())
                    .collect::<contextflow::error::Result<_>>()?,
                None => vec![MetricKind::W2, MetricKind::Mmd, MetricKind::Energy],
            };
            pipeline::cmd_evaluate(
                &predicted,
                &dataset,
                target,
                &holdout.unwrap_or_default(),
                &metrics,
                seed,
                &out,
            )
        }
        Command::Ablate {
            dataset,
            config,
            rules,
            out,
            overrides,
        } => pipeline::cmd_ablate(&dataset, &config, &overrides, rules.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", error_category(&err));
            ExitCode::FAILURE
        }
    }
}

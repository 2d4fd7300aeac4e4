mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmsconv::Variant;

/// Dynamic multi-scale convolution networks for dialect identification.
#[derive(Parser, Debug)]
#[command(name = "dmsconv", version)]
struct Cli {
    /// Seed for every random stream; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for utterance scoring (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Suppress progress lines on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic corpus (train.dmsf, test.dmsf, manifest.toml).
    Generate {
        /// Corpus spec (TOML); defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run config with [model], [train] and [paths] tables.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides model.variant.
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from a checkpoint (default: the configured one).
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<Option<PathBuf>>,
    },
    /// Score utterances with a trained model and write a score CSV.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// DMSF feature file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute Cavg, EER and the pair cost matrix.
    Evaluate {
        #[arg(long, requires = "data", conflicts_with = "scores")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Evaluate an existing score CSV instead of a checkpoint.
        #[arg(long, required_unless_present = "checkpoint")]
        scores: Option<PathBuf>,
        /// Restrict to these languages (comma separated names).
        #[arg(long, value_delimiter = ',')]
        subset: Vec<String>,
        /// Also write the scores used as CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Also write the report as TOML.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Count trainable parameters per layer.
    CountParams {
        /// Run config whose [model] table is counted.
        #[arg(long, conflicts_with = "variant")]
        config: Option<PathBuf>,
        /// Reference-size network of this variant; all four when omitted.
        #[arg(long)]
        variant: Option<Variant>,
        /// Machine-readable CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference check of every parameter gradient on tiny networks.
    Gradcheck {
        /// Only this variant (default: all four).
        #[arg(long)]
        variant: Option<Variant>,
        /// Number of random models per variant.
        #[arg(long, default_value_t = 1)]
        models: u64,
        /// Corrupt the analytic gradient of the named parameter.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Describe a DMSF feature file or a checkpoint.
    Inspect { path: PathBuf },
}

/// A check that ran to completion and found a numeric problem.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

/// 3 for numeric failures anywhere in the chain, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|cause| {
        cause.downcast_ref::<NumericFailure>().is_some()
            || cause
                .downcast_ref::<dmsconv::Error>()
                .is_some_and(dmsconv::Error::is_numeric)
    });
    if numeric {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let log = commands::Log::new(cli.quiet);
    match cli.command {
        Command::Generate { spec, out } => commands::generate(spec.as_deref(), &out, cli.seed),
        Command::Train {
            config,
            variant,
            resume,
        } => commands::train(&config, variant, resume, cli.seed, &log),
        Command::Score {
            checkpoint,
            data,
            out,
        } => commands::score(&checkpoint, &data, &out),
        Command::Evaluate {
            checkpoint,
            data,
            scores,
            subset,
            scores_out,
            report_out,
        } => {
            let source = match (checkpoint, data, scores) {
                (Some(c), Some(d), None) => commands::ScoreSource::Model {
                    checkpoint: c,
                    data: d,
                },
                (None, None, Some(s)) => commands::ScoreSource::Csv(s),
                _ => anyhow::bail!("give either --checkpoint with --data, or --scores"),
            };
            commands::evaluate(
                source,
                &subset,
                scores_out.as_deref(),
                report_out.as_deref(),
            )
        }
        Command::CountParams {
            config,
            variant,
            csv,
        } => commands::count_params(config.as_deref(), variant, csv),
        Command::Gradcheck {
            variant,
            models,
            inject_fault,
        } => commands::gradcheck(variant, models, cli.seed.unwrap_or(0), inject_fault),
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

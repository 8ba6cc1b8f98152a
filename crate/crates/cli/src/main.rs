use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kmarkov::estimator::LagRange;
use kmarkov_cli::commands::{self, EstimateArgs, Overrides};
use kmarkov_cli::config::parse_grid;
use kmarkov_cli::CliError;

/// Kernel estimation of covariate-dependent Markov transition matrices from
/// randomly spaced observations.
#[derive(Parser)]
#[command(name = "kmarkov", version)]
struct Cli {
    /// Worker threads for path generation and replications (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Override the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregation range as LO:HI.
    #[arg(long)]
    lags: Option<LagRange>,
    /// Evaluation points, e.g. "1.5/1;1.5/0" (`-` is the unconditional point).
    #[arg(long, value_parser = |s: &str| parse_grid(s).map(Grid))]
    grid: Option<Grid>,
}

#[derive(Clone)]
struct Grid(Vec<kmarkov::markov::CovariatePoint>);

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, lags: self.lags, grid: self.grid.clone().map(|g| g.0) }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paths into a JSONL dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate transition matrices at the grid points.
    Estimate {
        /// JSONL dataset; may be omitted when resuming a checkpoint.
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from this accumulator checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the accumulators to this checkpoint.
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fail (exit 3) when any grid point has no usable lag.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Absorb a dataset into a checkpoint.
    Update {
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to continue; a fresh one is started when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a replicated experiment and summarize the errors.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out, common } => {
            let o = commands::simulate(&config, &common.overrides(), &out)?;
            eprintln!("wrote {}", out.display());
            Ok(o.warnings)
        }
        Command::Estimate { dataset, config, checkpoint, save_checkpoint, out, strict, common } => {
            let args = EstimateArgs {
                config: config.as_deref(),
                dataset: dataset.as_deref(),
                checkpoint: checkpoint.as_deref(),
                save_checkpoint: save_checkpoint.as_deref(),
                out: &out,
                strict,
            };
            if args.dataset.is_none() && args.checkpoint.is_none() {
                eprintln!("warning: no dataset or checkpoint given, estimating from nothing");
            }
            let o = commands::estimate_cmd(&args, &common.overrides())?;
            eprintln!("wrote {}", out.display());
            Ok(o.warnings)
        }
        Command::Update { dataset, config, checkpoint, out, common } => {
            let o = commands::update(config.as_deref(), &dataset, checkpoint.as_deref(), &out, &common.overrides())?;
            eprintln!("wrote {}", out.display());
            Ok(o.warnings)
        }
        Command::Experiment { config, out, common } => {
            let (table, o) = commands::experiment(&config, &common.overrides(), &out)?;
            print!("{table}");
            eprintln!("wrote {}", out.display());
            Ok(o.warnings)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use adgen_cli::commands::{self, CommonOptions};
use adgen_cli::{CliResult, Outcome};
use adgen_core::prefopt::Strategy;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adgen", version, about = "Synthetic CTR-driven ad-creative experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON world configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Experiment manifest to start from.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,

    /// World seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,

    /// Experiment directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Recompute outputs even if they are already recorded.
    #[arg(long)]
    force: bool,
}

impl From<Common> for CommonOptions {
    fn from(c: Common) -> Self {
        Self {
            config: c.config,
            manifest: c.manifest,
            seed: c.seed,
            out: c.out,
            force: c.force,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the catalog, click logs and pair datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Catalog size.
        #[arg(long)]
        products: Option<usize>,
        /// Mean exposures per logged creative.
        #[arg(long)]
        exposures_per_image: Option<u64>,
    },
    /// Train the pairwise reward model.
    TrainRm {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the reward model on held-out pairs.
    EvalRm {
        #[command(flatten)]
        common: Common,
        /// Also train and evaluate the point-loss × attributes grid.
        #[arg(long)]
        ablation: bool,
    },
    /// Pre-train the description policy and calibrate the annotator.
    PretrainPolicy {
        #[command(flatten)]
        common: Common,
    },
    /// Run preference optimization for one or more strategies.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Repeatable; all strategies when omitted.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Vec<Strategy>,
    },
    /// Multi-seed study with summary statistics and ordering checks.
    Report {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; five seeds from the world seed by default.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn run(command: Command) -> CliResult<Outcome> {
    match command {
        Command::GenData {
            common,
            products,
            exposures_per_image,
        } => commands::gen_data(&common.into(), products, exposures_per_image),
        Command::TrainRm { common } => commands::train_rm(&common.into()),
        Command::EvalRm { common, ablation } => commands::eval_rm(&common.into(), ablation),
        Command::PretrainPolicy { common } => commands::pretrain_policy(&common.into()),
        Command::Optimize { common, strategy } => commands::optimize(&common.into(), &strategy),
        Command::Report { common, seeds } => commands::report(&common.into(), seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(outcome) => {
            println!("{outcome}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code())
        }
    }
}

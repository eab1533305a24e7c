//! Command-line experiment driver for `taskhedge`.
//!
//! `taskhedge <simulate|train|recalibrate|evaluate|report> --config <file>`
//! runs one pipeline step against the output directory named in the config
//! (or `--out`). Exit status is 0 on success, 1 for usage, configuration and
//! I/O errors, and 2 when training or evaluation hits a numerical failure.

pub mod commands;
pub mod config;
pub mod storage;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] taskhedge::Error),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(taskhedge::Error::NonFiniteLoss { .. } | taskhedge::Error::Domain(_)) => 2,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "taskhedge", version, about = "Multi-task deep hedging experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Experiment seed, overriding `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for path simulation.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset per task and write the manifest.
    Simulate(CommonArgs),
    /// Fit the multi-task network on the simulated datasets.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the existing checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the embedding of an unseen task on top of the checkpoint.
    Recalibrate(CommonArgs),
    /// Write the statistics selected in the config's evaluation section.
    Evaluate(CommonArgs),
    /// Run simulate, train, recalibrate (if configured) and evaluate.
    Report(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Simulate(c) | Command::Recalibrate(c) | Command::Evaluate(c) | Command::Report(c) => c,
            Command::Train { common, .. } => common,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let args = cli.command.common();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // Only the first pool request in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match &cli.command {
        Command::Simulate(_) => {
            let rows = commands::cmd_simulate(&cfg, &out)?;
            println!("simulated {} tasks into {}", rows.len(), out.display());
        }
        Command::Train { resume, .. } => {
            let log = commands::cmd_train(&cfg, &out, *resume)?;
            if let (Some(first), Some(last)) = (log.initial, log.final_record()) {
                println!("trained {} epochs: loss {:.6e} -> {:.6e}", log.epochs.len(), first.train_loss, last.train_loss);
            } else {
                println!("wrote initial checkpoint (0 epochs)");
            }
        }
        Command::Recalibrate(_) => {
            for r in commands::cmd_recalibrate(&cfg, &out)? {
                println!("{:<14} std {:.6e}  mean {:.6e}", r.strategy, r.std, r.mean);
            }
        }
        Command::Evaluate(_) => {
            let files = commands::cmd_evaluate(&cfg, &out)?;
            println!("wrote {} evaluation files", files.len());
        }
        Command::Report(_) => {
            let files = commands::cmd_report(&cfg, &out)?;
            println!("report complete, {} evaluation files in {}", files.len(), out.display());
        }
    }
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

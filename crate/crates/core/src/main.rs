use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prm_core::pipeline::{self, Overrides, PipelineError, RunLog};
use prm_core::selection::ScoreMode;

#[derive(Debug, Parser)]
#[command(name = "prm", version, about = "Function-level process reward model pipeline")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo completions per partial solution.
    #[arg(long)]
    k: Option<usize>,
    /// Candidates per problem.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    problems: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the problems file and copy it into the run directory.
    Ingest,
    /// Generate and decompose candidate programs.
    Generate,
    /// Label final programs by unit tests and partial programs by Monte Carlo completion.
    Label,
    /// Train the reward model and the reward-correction table.
    Train {
        /// Train on a planted synthetic instance instead of the run's labels.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Pick one candidate per problem.
    Select {
        #[arg(long, value_parser = parse_mode)]
        mode: ScoreMode,
    },
    /// Judge the selections and compute pass@1.
    Report {
        #[arg(long, value_parser = parse_mode)]
        mode: ScoreMode,
    },
}

fn parse_mode(s: &str) -> Result<ScoreMode, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<serde_json::Value, PipelineError> {
    let iterations = match &cli.command {
        Command::Train { iterations, .. } => *iterations,
        _ => None,
    };
    let overrides = Overrides {
        seed: cli.seed,
        k: cli.k,
        n: cli.n,
        workers: cli.workers,
        run_dir: cli.run_dir,
        problems: cli.problems,
        iterations,
    };
    let cfg = pipeline::prepare(&cli.config, &overrides)?;
    let log = RunLog::open(&cfg.paths.run_dir)?;
    match cli.command {
        Command::Ingest => pipeline::run_ingest(&cfg, &log),
        Command::Generate => pipeline::run_generate(&cfg, &log),
        Command::Label => pipeline::run_label(&cfg, &log),
        Command::Train { synthetic, .. } => pipeline::run_train(&cfg, synthetic, &log),
        Command::Select { mode } => pipeline::run_select(&cfg, mode, &log),
        Command::Report { mode } => pipeline::run_report(&cfg, mode, &log),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = PipelineError::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.record());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

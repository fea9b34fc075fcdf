//! `use-engine`: run tasks, evaluate solutions, replay trajectories and
//! summarize fleets of runs.
//!
//! Exit codes: 0 success, 1 "ran but unresolved" (eval/check) or an engine
//! failure during `run`, 2 usage or configuration errors.

mod artifacts;
mod inspect;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "use-engine", version, about = "Unified software-engineering agent engine and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the agent on one task manifest or a directory of manifests.
    Run(run::RunArgs),
    /// Judge a solution diff against a task.
    Eval(EvalArgs),
    /// Render a trajectory file step by step.
    Replay {
        trajectory: PathBuf,
    },
    /// Step histograms, cost breakdown, pass@k and time/cost correlation over a results directory.
    Stats(StatsArgs),
    /// Check that each task's reference solution resolves and the empty solution does not.
    Check {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Unified diff; an empty file is the empty solution.
    #[arg(long)]
    solution: PathBuf,
    /// Print the verdict as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct StatsArgs {
    results: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Engine(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Engine(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Eval(args) => inspect::cmd_eval(&args.manifest, &args.solution, args.json),
        Command::Replay { trajectory } => inspect::cmd_replay(&trajectory),
        Command::Stats(args) => inspect::cmd_stats(&args.results, args.json),
        Command::Check { manifest } => inspect::cmd_check(&manifest),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            let (Failure::Usage(e) | Failure::Engine(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}

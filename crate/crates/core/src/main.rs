use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sobirl::harness::{cmd_constants, cmd_run, cmd_validate, cmd_verify};
use sobirl::verify::ObjectiveChoice;

#[derive(Parser)]
#[command(
    name = "sobirl",
    version,
    about = "Bilevel RL over entropy-regularized tabular MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config: exit 0 valid, 2 schema error, 3 invariant violation.
    Validate { config: PathBuf },
    /// Run the configured solver and write metrics and final state.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Oracle solves for the true hyper-gradient each iteration.
        #[arg(long)]
        diagnostics: bool,
        /// Fill the wall_ms column (makes metrics timing-dependent).
        #[arg(long)]
        wall_time: bool,
    },
    /// Run verification checks and write a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "shaping")]
        objective: Objective,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print derived constants and suggested step sizes for a constants file.
    Constants { file: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Objective {
    Shaping,
    Preference,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Run {
            config,
            seed,
            diagnostics,
            wall_time,
        } => cmd_run(&config, seed, diagnostics, wall_time),
        Command::Verify {
            suite,
            seed,
            objective,
            report,
        } => {
            let choice = match objective {
                Objective::Shaping => ObjectiveChoice::Shaping,
                Objective::Preference => ObjectiveChoice::Preference,
            };
            cmd_verify(&suite, seed, choice, report.as_deref())
        }
        Command::Constants { file } => cmd_constants(&file),
    };
    ExitCode::from(code as u8)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cml_lab::{summary, RunOptions, EXIT_OK, WORKERS_ENV};

#[derive(Parser)]
#[command(
    name = "cml-lab",
    version,
    about = "Run coupled map lattice experiments from JSON configs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Cap on worker threads.
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the key numbers of a finished run.
    Summary { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, workers, out } => {
            let outcome = cml_lab::run(&config, &RunOptions { workers, out });
            if let Some(e) = &outcome.error {
                eprintln!("error: {e}");
            }
            if let Some(dir) = &outcome.out_dir {
                if outcome.exit_code == EXIT_OK {
                    println!("wrote {}", dir.display());
                }
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Cmd::Summary { dir } => match summary::summarize(&dir) {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitlora_cli::{cmd_compare, cmd_report, cmd_run};

#[derive(Parser)]
#[command(name = "splitlora", version, about = "Split federated LoRA fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a JSON config and write log.jsonl, summary.json and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a finished run as a table and write summary.csv.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
    /// Compare runs by final loss and time/bytes to a loss threshold.
    Compare {
        #[arg(long = "in", num_args = 1.., required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let result = match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out.as_deref()).map(|dir| println!("{}", dir.display())),
        Command::Report { dir } => cmd_report(&dir, &mut stdout),
        Command::Compare { dirs, threshold } => cmd_compare(&dirs, threshold, &mut stdout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

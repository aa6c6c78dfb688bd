use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use atinuke::gradcheck::DEFAULT_TOLERANCE;
use atinuke_cli::{commands, LogitsFormat};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "atinuke",
    version,
    about = "Small transformer engine: init, forward, gradient check, toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialise a model from a config file and write a checkpoint.
    Init {
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long, env = "ATINUKE_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run eval-mode inference over a token batch file.
    Forward {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Compare tape gradients with central finite differences on a tiny model.
    Gradcheck {
        #[arg(long, env = "ATINUKE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Train on a synthetic task and write the final checkpoint.
    TrainToy {
        #[arg(long, value_enum, default_value_t = Task::Copy)]
        task: Task,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, env = "ATINUKE_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Copy,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = io::stdout().lock();
    let result = match cli.command {
        Command::Init { config, seed, out } => commands::init(&config, seed, &out, &mut stdout),
        Command::Forward {
            checkpoint,
            input,
            output,
            format,
        } => {
            let format = match format {
                Format::Text => LogitsFormat::Text,
                Format::Binary => LogitsFormat::Binary,
            };
            commands::forward(&checkpoint, &input, &output, format, &mut stdout)
        }
        Command::Gradcheck { seed, tolerance } => commands::gradcheck(seed, tolerance, &mut stdout),
        Command::TrainToy {
            task: Task::Copy,
            steps,
            seed,
            learning_rate,
            out,
        } => commands::train_toy(steps, seed, learning_rate, &out, &mut stdout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

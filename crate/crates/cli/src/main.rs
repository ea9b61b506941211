use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sheafpc_cli::{cmd_diagnose, cmd_spectrum, cmd_sweep, cmd_train, RunOptions};

#[derive(Parser)]
#[command(name = "sheafpc", version, about = "Sheaf diagnostics and training for linear predictive-coding networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cohomology, spectrum, harmonic load and diffusive activation.
    Diagnose(Common),
    /// Train on the identity task and record metrics.
    Train(Common),
    /// Train across a θ or size grid.
    Sweep(Common),
    /// Spectrum of the relative Laplacian and a diffusion trace.
    Spectrum(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

impl From<Common> for RunOptions {
    fn from(c: Common) -> Self {
        RunOptions {
            config: c.config,
            out: c.out,
            seed: c.seed,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Diagnose(c) => cmd_diagnose(&c.into()),
        Command::Train(c) => cmd_train(&c.into()),
        Command::Sweep(c) => cmd_sweep(&c.into()),
        Command::Spectrum(c) => cmd_spectrum(&c.into()),
    };
    match result {
        Ok(m) => {
            log::info!("wrote {} files", m.files.len() + 1);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

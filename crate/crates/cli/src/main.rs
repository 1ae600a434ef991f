use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stabcode_cli::commands::{all_diverged, cmd_assign, cmd_design, cmd_simulate, cmd_stability, cmd_tables};
use stabcode_cli::config::{Config, Grid};
use stabcode_cli::CliError;

#[derive(Parser)]
#[command(name = "stabcode", version, about = "Stabilizing multiple-description codes for networked control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Loss-probability grid `start:stop:step` for stability and simulate.
    #[arg(long, global = true)]
    grid: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Index assignment table.
    Assign,
    /// Stability bounds and a recommended quantizer step.
    Design,
    /// Stability tests over the loss grid.
    Stability,
    /// Closed-loop simulation over the loss grid.
    Simulate,
    /// Distortion or efficiency table.
    Tables { which: Which },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Distortion,
    Efficiency,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(g) = &cli.grid {
        let g = Grid::parse(g)?;
        cfg.stability.grid = g.clone();
        cfg.simulate.grid = g;
    }
    let table = match cli.command {
        Command::Assign => cmd_assign(&cfg)?,
        Command::Design => cmd_design(&cfg)?,
        Command::Stability => cmd_stability(&cfg)?,
        Command::Simulate => cmd_simulate(&cfg)?,
        Command::Tables { which } => cmd_tables(
            &cfg,
            match which {
                Which::Distortion => "distortion",
                Which::Efficiency => "efficiency",
            },
        )?,
    };
    table.write(cli.out.as_deref())?;
    if all_diverged(&table) {
        return Err(CliError::Diverged);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stabcode: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

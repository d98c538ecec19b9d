//! `ditforge` command-line front end.
//!
//! Exit status: 0 on success, 1 on a domain failure (bad input file,
//! infeasible request), 2 on a usage error. Diagnostics go to standard error;
//! `DITFORGE_LOG` sets their verbosity.

mod calibrate;
mod emu;
mod pipe;
mod plan;
mod telemetry;
mod units;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ditforge", version, about = "Planning, emulation and data-plane tools for video DiT training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parallelism emulator.
    Emu {
        #[command(subcommand)]
        command: emu::EmuCommand,
    },
    /// Batch plan for a clip manifest.
    Plan(plan::PlanArgs),
    /// Tensor pipes over TCP, plus an in-process demo.
    Pipe {
        #[command(subcommand)]
        command: pipe::PipeCommand,
    },
    /// Telemetry spool analysis.
    Telemetry {
        #[command(subcommand)]
        command: telemetry::TelemetryCommand,
    },
    /// Fit the per-sample FLOPs model to a table.
    Calibrate(calibrate::CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

/// Writes `text` to `out` when given, else to standard output.
pub fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))?;
            log::info!("wrote {}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let mut write = || -> std::io::Result<()> {
                stdout.write_all(text.as_bytes())?;
                if !text.ends_with('\n') {
                    stdout.write_all(b"\n")?;
                }
                stdout.flush()
            };
            match write() {
                // A closed reader (e.g. `| head`) is not an error.
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DITFORGE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Emu { command } => emu::run(command),
        Command::Plan(args) => plan::run(args),
        Command::Pipe { command } => pipe::run(command),
        Command::Telemetry { command } => telemetry::run(command),
        Command::Calibrate(args) => calibrate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dissensus_cli::{
    cmd_run, cmd_sweep, cmd_verify, parse_config, parse_script, CliError, EmitKind, Exit,
    ExperimentSpec, Overrides, VerifySource,
};

/// Quantized dissensus simulator.
///
/// Exit codes: 0 success, 1 invariant violation, 2 configuration error,
/// 3 internal error.
#[derive(Parser)]
#[command(name = "dissensus", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write the requested outputs.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Check every invariant on a recorded trace or a fresh run.
    Verify {
        /// Trace file to verify instead of running a config.
        #[arg(long, conflicts_with = "config")]
        trace: Option<PathBuf>,
        /// Snapshot sidecar to cross-check against the trace.
        #[arg(long, requires = "trace")]
        snapshots: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every cell of the config's [sweep] section and tabulate them.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_ticks: Option<u64>,
    /// Comma-separated outputs: trace, snapshots, frames, svg, report.
    #[arg(long, value_delimiter = ',')]
    emit: Option<Vec<EmitKind>>,
    /// Also run the exhaustive oracle on the configuration.
    #[arg(long)]
    oracle: bool,
    /// Scripted edge schedule, one edge per line.
    #[arg(long)]
    script: Option<PathBuf>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, CliError> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| CliError::Config("--config is required".into()))?;
        let text = read(path)?;
        let script = match &self.script {
            Some(p) => Some(
                parse_script(&read(p)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        let ov = Overrides {
            out: self.out.clone(),
            seed: self.seed,
            max_ticks: self.max_ticks,
            emit: self.emit.clone(),
            script,
        };
        parse_config(&text, &ov).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> Result<Exit, CliError> {
    let mut out = io::stdout().lock();
    match cli.cmd {
        Command::Run { common } => cmd_run(&common.spec()?, common.oracle, &mut out),
        Command::Verify {
            trace: Some(trace),
            snapshots,
            common,
        } => cmd_verify(
            VerifySource::TraceFile { trace, snapshots },
            common.oracle,
            &mut out,
        ),
        Command::Verify {
            trace: None,
            common,
            ..
        } => {
            let spec = common.spec()?;
            cmd_verify(VerifySource::Spec(&spec), common.oracle, &mut out)
        }
        Command::Sweep { common } => cmd_sweep(&common.spec()?, &mut out),
    }
}

fn main() -> ExitCode {
    let exit = match dispatch(Cli::parse()) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit()
        }
    };
    ExitCode::from(exit as u8)
}

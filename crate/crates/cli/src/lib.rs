//! Configuration loading and the `run`, `verify` and `sweep` commands of the
//! `dissensus` binary.

pub mod commands;
pub mod spec;

pub use commands::{cmd_run, cmd_sweep, cmd_verify, CliError, Exit, SweepRow, VerifySource};
pub use spec::{parse_config, parse_script, EmitKind, ExperimentSpec, Overrides, SpecError};

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use dissensus::analysis::{
    check_density_trend, exhaustive_oracle, export_pie_frames, frame_to_svg, frames_to_csv,
    full_report, InvariantReport, OracleError, OracleOptions, Status,
};
use dissensus::engine::SimError;
use dissensus::graph::{classify, ShapeFlag};
use dissensus::trace_io::{read_trace, write_snapshots, write_trace};
use dissensus::{run, RunConfig, Termination, Trace, TOOL_VERSION};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::spec::{Cell, EmitKind, ExperimentSpec, SpecError};

/// Process exit status; higher is worse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Exit {
    Success = 0,
    Violation = 1,
    Config = 2,
    Internal = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            CliError::Config(_) => Exit::Config,
            CliError::Internal(_) => Exit::Internal,
        }
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Config(c) => CliError::Config(c.to_string()),
        other => CliError::Internal(anyhow::Error::new(other).context("simulation failed")),
    }
}

const SHAPES: [ShapeFlag; 3] = [ShapeFlag::Complete, ShapeFlag::Hole, ShapeFlag::Chain];

/// Shape flags that hold at `t_0` and after every event.
pub fn shapes_held(trace: &Trace) -> Vec<ShapeFlag> {
    let Ok(start) = trace
        .config
        .topology()
        .map_err(drop)
        .and_then(|g| classify(&g).map_err(drop))
    else {
        return Vec::new();
    };
    SHAPES
        .into_iter()
        .filter(|f| f.holds(start) && trace.snapshots.iter().all(|s| f.holds(s.shape)))
        .collect()
}

fn join_flags(flags: &[ShapeFlag]) -> String {
    if flags.is_empty() {
        "none".into()
    } else {
        flags
            .iter()
            .map(ShapeFlag::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// One-line run summary: termination, event count, final size and shape.
pub fn summary(trace: &Trace) -> String {
    let shape = trace
        .snapshots
        .last()
        .map(|s| s.shape.to_string())
        .or_else(|| {
            let g = trace.config.topology().ok()?;
            classify(&g).ok().map(|s| s.to_string())
        })
        .unwrap_or_else(|| "generic".into());
    let events = trace.final_epoch;
    format!(
        "{} after {events} event{}; n = {}; final shape {shape}; held throughout: {}",
        trace.termination,
        if events == 1 { "" } else { "s" },
        trace.final_states.len(),
        join_flags(&shapes_held(trace)),
    )
}

fn provenance(cfg: &RunConfig) -> String {
    format!("# {TOOL_VERSION} config={}", cfg.hash())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn oracle_section(cfg: &RunConfig) -> Result<(String, bool), CliError> {
    match exhaustive_oracle(cfg, OracleOptions::default()) {
        Ok(r) => Ok((format!("oracle: {r}"), r.passed())),
        Err(e @ (OracleError::NonUnitDelta(_) | OracleError::Config(_))) => {
            Err(CliError::Config(format!("oracle: {e}")))
        }
        Err(e @ OracleError::BudgetExceeded { .. }) => Err(CliError::Config(format!(
            "oracle: {e}; the oracle is meant for systems with a handful of agents"
        ))),
    }
}

fn report_text(trace: &Trace, report: &InvariantReport, oracle: Option<&str>) -> String {
    let mut out = provenance(&trace.config);
    out.push('\n');
    let _ = writeln!(out, "{}", summary(trace));
    out.push_str(&report.to_string());
    if let Some(o) = oracle {
        out.push_str(o);
        if !o.ends_with('\n') {
            out.push('\n');
        }
    }
    let _ = match report.first_failure() {
        Some(f) => writeln!(out, "RESULT fail: first failing invariant `{}`", f.name),
        None => writeln!(out, "RESULT pass"),
    };
    out
}

/// Runs the base configuration and writes the requested outputs.
pub fn cmd_run(
    spec: &ExperimentSpec,
    oracle: bool,
    stdout: &mut dyn Write,
) -> Result<Exit, CliError> {
    let trace = run(&spec.base).map_err(sim_error)?;
    let dir = &spec.output.dir;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    writeln!(stdout, "{}", summary(&trace)).context("stdout")?;
    let out = &spec.output;
    if out.wants(EmitKind::Trace) {
        let mut w = create(&dir.join("trace.jsonl"))?;
        write_trace(&trace, &mut w).context("writing trace")?;
        w.flush().context("writing trace")?;
    }
    if out.wants(EmitKind::Snapshots) {
        let mut w = create(&dir.join("snapshots.jsonl"))?;
        write_snapshots(&trace, &mut w).context("writing snapshots")?;
        w.flush().context("writing snapshots")?;
    }
    if out.wants(EmitKind::Frames) || out.wants(EmitKind::Svg) {
        let frames = export_pie_frames(&trace, out.frames_per_tick);
        if out.wants(EmitKind::Frames) {
            write_text(&dir.join("frames.csv"), &frames_to_csv(&trace, &frames))?;
        }
        if out.wants(EmitKind::Svg) {
            let sub = dir.join("frames");
            fs::create_dir_all(&sub).with_context(|| format!("cannot create {}", sub.display()))?;
            for (i, f) in frames.iter().enumerate() {
                let svg = format!(
                    "<!-- {} -->\n{}",
                    &provenance(&trace.config)[2..],
                    frame_to_svg(f)
                );
                write_text(&sub.join(format!("frame-{i:05}.svg")), &svg)?;
            }
        }
    }
    let mut exit = Exit::Success;
    if out.wants(EmitKind::Report) || oracle {
        let report = full_report(&trace);
        let oracle_text = if oracle {
            let (text, ok) = oracle_section(&trace.config)?;
            if !ok {
                exit = Exit::Violation;
            }
            Some(text)
        } else {
            None
        };
        if !report.all_passed() {
            exit = Exit::Violation;
        }
        let text = report_text(&trace, &report, oracle_text.as_deref());
        if out.wants(EmitKind::Report) {
            write_text(&dir.join("report.txt"), &text)?;
        }
        if exit != Exit::Success {
            write!(stdout, "{text}").context("stdout")?;
        }
    }
    Ok(exit)
}

/// What `verify` checks: a recorded trace or a fresh run of a config.
pub enum VerifySource<'a> {
    TraceFile {
        trace: PathBuf,
        snapshots: Option<PathBuf>,
    },
    Spec(&'a ExperimentSpec),
}

pub fn load_trace(trace: &Path, snapshots: Option<&Path>) -> Result<Trace, CliError> {
    let text =
        fs::read_to_string(trace).with_context(|| format!("cannot read {}", trace.display()))?;
    let snaps = snapshots
        .map(|p| fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display())))
        .transpose()?;
    read_trace(&text, snaps.as_deref())
        .map_err(|e| CliError::Config(format!("{}: {e}", trace.display())))
}

pub fn cmd_verify(
    src: VerifySource<'_>,
    oracle: bool,
    stdout: &mut dyn Write,
) -> Result<Exit, CliError> {
    let trace = match src {
        VerifySource::TraceFile { trace, snapshots } => load_trace(&trace, snapshots.as_deref())?,
        VerifySource::Spec(spec) => run(&spec.base).map_err(sim_error)?,
    };
    let report = full_report(&trace);
    let mut ok = report.all_passed();
    let oracle_text = if oracle {
        let (text, passed) = oracle_section(&trace.config)?;
        ok &= passed;
        Some(text)
    } else {
        None
    };
    write!(
        stdout,
        "{}",
        report_text(&trace, &report, oracle_text.as_deref())
    )
    .context("stdout")?;
    Ok(if ok { Exit::Success } else { Exit::Violation })
}

/// One row of the sweep table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub seed: u64,
    pub upper: u64,
    pub rules: String,
    pub chi: u64,
    pub config_hash: String,
    pub termination: String,
    pub consensus_value: Option<u64>,
    pub epochs: Option<u64>,
    pub ticks: Option<u64>,
    pub first_duplication_epoch: Option<u64>,
    pub final_n: Option<usize>,
    pub final_edges: Option<usize>,
    pub final_cycles: Option<usize>,
    /// Edges per agent at the end of the run.
    pub final_density: Option<String>,
    /// `ceil(chi / B)`, the lower bound on the agent count.
    pub lower_bound: u64,
    pub min_n: Option<usize>,
    pub max_n: Option<usize>,
    pub shape_held: String,
    pub density_trend: String,
    pub invariants: String,
    pub first_failure: String,
    pub error: String,
}

impl SweepRow {
    fn exit(&self) -> Exit {
        if !self.error.is_empty() {
            Exit::Internal
        } else if self.invariants == "fail" {
            Exit::Violation
        } else {
            Exit::Success
        }
    }
}

fn trend_status(r: &InvariantReport) -> &'static str {
    if r.results.iter().any(|x| x.failed()) {
        "fail"
    } else if r
        .results
        .iter()
        .all(|x| matches!(x.status, Status::Skipped { .. }))
    {
        "skipped"
    } else {
        "pass"
    }
}

pub fn sweep_row(cell: &Cell) -> SweepRow {
    let cfg = &cell.config;
    let chi = cfg.chi();
    let mut row = SweepRow {
        cell: cell.index,
        seed: cell.seed,
        upper: cell.upper,
        rules: cell.rules.to_string(),
        chi,
        config_hash: cfg.hash(),
        lower_bound: chi.div_ceil(cell.upper),
        ..SweepRow::default()
    };
    let trace = match run(cfg) {
        Ok(t) => t,
        Err(e) => {
            row.termination = "error".into();
            row.error = e.to_string();
            return row;
        }
    };
    let n = trace.final_states.len();
    let m = trace.final_edges.len();
    let sizes = std::iter::once(cfg.states.len()).chain(trace.snapshots.iter().map(|s| s.agents));
    let report = full_report(&trace);
    row.termination = trace.termination.to_string();
    row.consensus_value = match trace.termination {
        Termination::Consensus { value } => Some(value),
        _ => None,
    };
    row.epochs = Some(trace.final_epoch);
    row.ticks = Some(trace.final_tick);
    row.first_duplication_epoch = trace.first_duplication_epoch();
    row.final_n = Some(n);
    row.final_edges = Some(m);
    row.final_cycles = Some((m + 1).saturating_sub(n));
    row.final_density = Some(format!("{:.6}", m as f64 / n as f64));
    row.min_n = sizes.clone().min();
    row.max_n = sizes.max();
    row.shape_held = join_flags(&shapes_held(&trace));
    row.density_trend = trend_status(&check_density_trend(&trace, None)).into();
    row.invariants = if report.all_passed() { "pass" } else { "fail" }.into();
    row.first_failure = report
        .first_failure()
        .map(|f| f.name.clone())
        .unwrap_or_default();
    row
}

/// Rows in cell order; cells run concurrently.
pub fn sweep_rows(cells: &[Cell]) -> Vec<SweepRow> {
    cells.par_iter().map(sweep_row).collect()
}

pub fn sweep_csv(spec: &ExperimentSpec, rows: &[SweepRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).context("encoding sweep row")?;
    }
    let body = w
        .into_inner()
        .map_err(|e| anyhow::anyhow!("encoding sweep table: {e}"))?;
    let body = String::from_utf8(body).context("sweep table is utf-8")?;
    Ok(format!("# {TOOL_VERSION} spec={}\n{body}", spec.hash))
}

pub fn cmd_sweep(spec: &ExperimentSpec, stdout: &mut dyn Write) -> Result<Exit, CliError> {
    if !spec.has_sweep() {
        return Err(CliError::Config(
            "sweep: the config has no [sweep] section".into(),
        ));
    }
    let rows = sweep_rows(&spec.cells);
    let dir = &spec.output.dir;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join("sweep.csv");
    write_text(&path, &sweep_csv(spec, &rows)?)?;
    let count = |e: Exit| rows.iter().filter(|r| r.exit() == e).count();
    writeln!(
        stdout,
        "{} cells: {} passed, {} with invariant failures, {} errors; table in {}",
        rows.len(),
        count(Exit::Success),
        count(Exit::Violation),
        count(Exit::Internal),
        path.display()
    )
    .context("stdout")?;
    Ok(rows
        .iter()
        .map(SweepRow::exit)
        .max()
        .unwrap_or(Exit::Success))
}

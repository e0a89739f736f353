//! Newline-delimited JSON trace files.
//!
//! A trace file starts with a versioned header carrying the tool version,
//! the config hash and the full config; then one line per gossip tick or
//! critical event; then an `end` line with the termination reason and final
//! configuration. Epoch snapshots go to a sidecar file with its own header.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EpochSnapshot, RunConfig, Termination, Trace, TraceRecord};
use crate::events::CriticalEventRecord;
use crate::graph::{AgentId, Edge};
use crate::protocol::GossipRecord;
use crate::TOOL_VERSION;

pub const TRACE_FORMAT: &str = "dissensus-trace";
pub const SNAPSHOT_FORMAT: &str = "dissensus-snapshots";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct TraceParseError {
    pub line: usize,
    pub msg: String,
}

fn perr(line: usize, msg: impl Into<String>) -> TraceParseError {
    TraceParseError {
        line,
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub tool: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

impl Header {
    fn new(format: &str, cfg: &RunConfig, with_config: bool) -> Self {
        Header {
            format: format.into(),
            version: FORMAT_VERSION,
            tool: TOOL_VERSION.into(),
            config_hash: cfg.hash(),
            config: with_config.then(|| cfg.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndRecord {
    pub termination: Termination,
    pub tick: u64,
    pub epoch: u64,
    pub final_states: BTreeMap<AgentId, u64>,
    pub final_edges: Vec<Edge>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Line {
    Gossip(GossipRecord),
    Event(CriticalEventRecord),
    End(EndRecord),
}

pub fn write_trace<W: Write>(trace: &Trace, mut w: W) -> io::Result<()> {
    let header = Header::new(TRACE_FORMAT, &trace.config, true);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &trace.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    let end = Line::End(EndRecord {
        termination: trace.termination,
        tick: trace.final_tick,
        epoch: trace.final_epoch,
        final_states: trace.final_states.clone(),
        final_edges: trace.final_edges.clone(),
    });
    serde_json::to_writer(&mut w, &end)?;
    w.write_all(b"\n")
}

pub fn write_snapshots<W: Write>(trace: &Trace, mut w: W) -> io::Result<()> {
    serde_json::to_writer(&mut w, &Header::new(SNAPSHOT_FORMAT, &trace.config, false))?;
    w.write_all(b"\n")?;
    for s in &trace.snapshots {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn trace_to_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn snapshots_to_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_snapshots(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

fn parse_header(line: usize, text: &str, format: &str) -> Result<Header, TraceParseError> {
    let h: Header =
        serde_json::from_str(text).map_err(|e| perr(line, format!("bad header: {e}")))?;
    if h.format != format {
        return Err(perr(
            line,
            format!("expected format `{format}`, got `{}`", h.format),
        ));
    }
    if h.version != FORMAT_VERSION {
        return Err(perr(
            line,
            format!("unsupported format version {}", h.version),
        ));
    }
    Ok(h)
}

/// Parses a trace file and, optionally, its snapshot sidecar.
pub fn read_trace(
    trace_text: &str,
    snapshots_text: Option<&str>,
) -> Result<Trace, TraceParseError> {
    let mut lines = trace_text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hl, htext) = lines.next().ok_or_else(|| perr(1, "empty trace"))?;
    let header = parse_header(hl, htext, TRACE_FORMAT)?;
    let config = header
        .config
        .ok_or_else(|| perr(hl, "trace header lacks the run config"))?;
    if config.hash() != header.config_hash {
        return Err(perr(hl, "config hash does not match the embedded config"));
    }
    let mut records = Vec::new();
    let mut end = None;
    let mut last = hl;
    for (n, text) in lines {
        last = n;
        if text.trim().is_empty() {
            continue;
        }
        if end.is_some() {
            return Err(perr(n, "content after end record"));
        }
        match serde_json::from_str::<Line>(text).map_err(|e| perr(n, e.to_string()))? {
            Line::Gossip(g) => records.push(TraceRecord::Gossip(g)),
            Line::Event(e) => records.push(TraceRecord::Event(e)),
            Line::End(e) => end = Some(e),
        }
    }
    let end = end.ok_or_else(|| perr(last + 1, "truncated trace: missing end record"))?;
    let snapshots = match snapshots_text {
        Some(text) => read_snapshots(text, &header.config_hash)?,
        None => Vec::new(),
    };
    Ok(Trace {
        config,
        records,
        snapshots,
        termination: end.termination,
        final_tick: end.tick,
        final_epoch: end.epoch,
        final_states: end.final_states,
        final_edges: end.final_edges,
    })
}

fn read_snapshots(text: &str, config_hash: &str) -> Result<Vec<EpochSnapshot>, TraceParseError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hl, htext) = lines.next().ok_or_else(|| perr(1, "empty snapshot file"))?;
    let header = parse_header(hl, htext, SNAPSHOT_FORMAT)?;
    if header.config_hash != config_hash {
        return Err(perr(hl, "snapshot file belongs to a different config"));
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| perr(n, e.to_string())))
        .collect()
}

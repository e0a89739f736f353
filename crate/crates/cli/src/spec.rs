//! Experiment configuration: the versioned TOML schema, operator overrides,
//! and expansion into validated run configurations.
//!
//! ```toml
//! version = 1
//!
//! [system]
//! upper = 8              # duplication threshold B
//! states = [4, 6]        # agent i gets states[i - 1]; or `chi` + `agents`
//! edges = [[1, 2]]       # or shape = "hole" | "chain" | "complete" | "random"
//!
//! [rules]
//! delta = "unit"              # unit | max | uniform
//! scheduler = "round-robin"   # round-robin | random | scripted
//! death = "star"              # star | star-random | clique
//! duplication = "partition"   # partition | full
//!
//! [run]
//! seed = 0
//! max_ticks = 1000000
//!
//! [output]
//! dir = "out"
//! emit = ["trace", "snapshots", "report"]
//!
//! [sweep]
//! seeds = { start = 0, count = 10 }
//! upper = [4, 6, 8]
//! rules = ["partition+star", "full+clique"]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use dissensus::engine::ConfigError;
use dissensus::events::{DeathRuleKind, DuplicationRuleKind, JStarPolicy, RuleSet, SplitPolicy};
use dissensus::protocol::{DeltaKind, SchedulerKind};
use dissensus::scenario::{build_topology, random_state_map, StartShape};
use dissensus::{AgentId, Edge, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_MAX_TICKS: u64 = 1_000_000;

/// A configuration problem, located by its key path.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{path}: {msg}")]
pub struct SpecError {
    pub path: String,
    pub msg: String,
}

fn err(path: impl Into<String>, msg: impl fmt::Display) -> SpecError {
    SpecError {
        path: path.into(),
        msg: msg.to_string(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub version: u32,
    pub system: RawSystem,
    #[serde(default)]
    pub rules: RawRules,
    #[serde(default)]
    pub run: RawRun,
    #[serde(default)]
    pub output: RawOutput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<RawSweep>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    pub upper: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[u64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeName>,
    /// Edge count for `shape = "random"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_edges: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeName {
    Hole,
    Chain,
    Complete,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerName {
    #[default]
    RoundRobin,
    Random,
    Scripted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeathName {
    #[default]
    Star,
    StarRandom,
    Clique,
}

impl From<DeathName> for DeathRuleKind {
    fn from(d: DeathName) -> Self {
        match d {
            DeathName::Star => DeathRuleKind::Star(JStarPolicy::MaxState),
            DeathName::StarRandom => DeathRuleKind::Star(JStarPolicy::Random),
            DeathName::Clique => DeathRuleKind::Clique,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRules {
    #[serde(default)]
    pub delta: DeltaKind,
    #[serde(default)]
    pub scheduler: SchedulerName,
    /// Edge sequence for the scripted scheduler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<[u64; 2]>>,
    #[serde(default)]
    pub death: DeathName,
    #[serde(default)]
    pub duplication: DuplicationRuleKind,
    /// Larger child share; the default is the half split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRun {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ticks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<u64>,
    #[serde(default)]
    pub detect_period: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmitKind {
    Trace,
    Snapshots,
    Frames,
    Svg,
    Report,
}

impl std::str::FromStr for EmitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.trim() {
            "trace" => EmitKind::Trace,
            "snapshots" => EmitKind::Snapshots,
            "frames" => EmitKind::Frames,
            "svg" => EmitKind::Svg,
            "report" => EmitKind::Report,
            other => {
                return Err(format!(
                    "unknown output `{other}`, expected trace, snapshots, frames, svg or report"
                ))
            }
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit: Option<Vec<EmitKind>>,
    /// Also emit a pie frame after every gossip step.
    #[serde(default)]
    pub frames_per_tick: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    #[serde(default)]
    pub start: u64,
    pub count: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSweep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<Vec<String>>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_ticks: Option<u64>,
    pub emit: Option<Vec<EmitKind>>,
    pub script: Option<Vec<[u64; 2]>>,
}

impl Overrides {
    fn apply(&self, raw: &mut RawConfig) {
        if let Some(d) = &self.out {
            raw.output.dir = Some(d.clone());
        }
        if let Some(s) = self.seed {
            raw.run.seed = s;
        }
        if let Some(m) = self.max_ticks {
            raw.run.max_ticks = Some(m);
        }
        if let Some(e) = &self.emit {
            raw.output.emit = Some(e.clone());
        }
        if let Some(s) = &self.script {
            raw.rules.scheduler = SchedulerName::Scripted;
            raw.rules.script = Some(s.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub emit: BTreeSet<EmitKind>,
    pub frames_per_tick: bool,
}

impl OutputSpec {
    pub fn wants(&self, k: EmitKind) -> bool {
        self.emit.contains(&k)
    }
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub index: usize,
    pub seed: u64,
    pub upper: u64,
    pub rules: RuleSet,
    pub config: RunConfig,
}

/// A parsed, validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    raw: RawConfig,
    /// The run described by the file with its overrides applied.
    pub base: RunConfig,
    pub output: OutputSpec,
    /// Expanded sweep, in row order; empty without a `[sweep]` section.
    pub cells: Vec<Cell>,
    /// Hex digest of the effective configuration.
    pub hash: String,
}

impl ExperimentSpec {
    pub fn raw(&self) -> &RawConfig {
        &self.raw
    }

    pub fn has_sweep(&self) -> bool {
        self.raw.sweep.is_some()
    }
}

pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentSpec, SpecError> {
    let mut raw: RawConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let path = e
            .span()
            .map(|s| key_path_at(text, s.start))
            .unwrap_or_else(|| "config".into());
        err(path, msg)
    })?;
    overrides.apply(&mut raw);
    resolve(raw)
}

/// Dotted key path of the entry containing byte `offset`, with its line.
fn key_path_at(text: &str, offset: usize) -> String {
    let offset = offset.min(text.len());
    let line_no = text[..offset].matches('\n').count() + 1;
    let mut section = None;
    let mut key = None;
    for (i, line) in text.lines().enumerate().take(line_no) {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            section = Some(name.trim_matches(['[', ']']).trim().to_string());
            key = None;
        } else if let Some((k, _)) = t.split_once('=') {
            if !t.starts_with('#') {
                key = Some(k.trim().to_string());
            }
        } else if i + 1 == line_no {
            key = None;
        }
    }
    let path = match (section, key) {
        (Some(s), Some(k)) => format!("{s}.{k}"),
        (Some(s), None) => s,
        (None, Some(k)) => k,
        (None, None) => "config".into(),
    };
    format!("{path} (line {line_no})")
}

pub fn resolve(raw: RawConfig) -> Result<ExperimentSpec, SpecError> {
    if raw.version != CONFIG_VERSION {
        return Err(err(
            "version",
            format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                raw.version
            ),
        ));
    }
    let template = Template::new(&raw)?;
    let base_rules = RuleSet::new(raw.rules.duplication, raw.rules.death.into());
    let base = template.build(raw.run.seed, raw.system.upper, base_rules, "")?;
    let cells = match &raw.sweep {
        None => Vec::new(),
        Some(sw) => expand(&template, sw, &raw, base_rules)?,
    };
    let output = OutputSpec {
        dir: raw
            .output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out")),
        emit: raw
            .output
            .emit
            .clone()
            .unwrap_or_else(|| vec![EmitKind::Trace, EmitKind::Snapshots, EmitKind::Report])
            .into_iter()
            .collect(),
        frames_per_tick: raw.output.frames_per_tick,
    };
    // Output placement does not change results, so it stays out of the hash.
    let mut hashed = raw.clone();
    hashed.output = RawOutput::default();
    let canon = toml::to_string(&hashed).map_err(|e| err("config", e))?;
    let hash = hex::encode(&Sha256::digest(canon.as_bytes())[..8]);
    Ok(ExperimentSpec {
        raw,
        base,
        output,
        cells,
        hash,
    })
}

fn expand(
    t: &Template,
    sw: &RawSweep,
    raw: &RawConfig,
    base_rules: RuleSet,
) -> Result<Vec<Cell>, SpecError> {
    let seeds: Vec<u64> = match &sw.seeds {
        Some(r) if r.count == 0 => return Err(err("sweep.seeds.count", "must be at least 1")),
        Some(r) => (0..r.count)
            .map(|k| {
                r.start
                    .checked_add(k)
                    .ok_or_else(|| err("sweep.seeds", "seed range overflows u64"))
            })
            .collect::<Result<_, _>>()?,
        None => vec![raw.run.seed],
    };
    let uppers = match &sw.upper {
        Some(v) if v.is_empty() => return Err(err("sweep.upper", "must not be empty")),
        Some(v) => v.clone(),
        None => vec![raw.system.upper],
    };
    let rules = match &sw.rules {
        Some(v) if v.is_empty() => return Err(err("sweep.rules", "must not be empty")),
        Some(v) => v
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<RuleSet>()
                    .map_err(|m| err(format!("sweep.rules[{i}]"), m))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![base_rules],
    };
    let mut cells = Vec::with_capacity(seeds.len() * uppers.len() * rules.len());
    for (ui, &upper) in uppers.iter().enumerate() {
        for &r in &rules {
            for &seed in &seeds {
                let index = cells.len();
                let ctx = format!("sweep cell {index} (seed {seed}, upper {upper}, rules {r})");
                let config = t.build(seed, upper, r, &ctx).map_err(|e| {
                    if e.path == "system.upper" && sw.upper.is_some() {
                        err(format!("sweep.upper[{ui}]"), e.msg)
                    } else {
                        e
                    }
                })?;
                cells.push(Cell {
                    index,
                    seed,
                    upper,
                    rules: r,
                    config,
                });
            }
        }
    }
    Ok(cells)
}

enum StateSource {
    Fixed(Vec<u64>),
    Random { chi: u64, agents: u64 },
}

enum EdgeSource {
    Fixed(Vec<Edge>),
    Shape(StartShape),
}

/// Everything in a config that does not depend on the sweep axes.
struct Template {
    states: StateSource,
    edges: EdgeSource,
    delta: DeltaKind,
    scheduler: SchedulerKind,
    split: SplitPolicy,
    max_ticks: u64,
    max_epochs: Option<u64>,
    detect_period: bool,
}

fn edge_list(path: &str, pairs: &[[u64; 2]], n: u64) -> Result<Vec<Edge>, SpecError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for (i, &[a, b]) in pairs.iter().enumerate() {
        let at = format!("{path}[{i}]");
        for v in [a, b] {
            if v == 0 || v > n {
                return Err(err(
                    &at,
                    format!("agent {v} is not declared (ids are 1..={n})"),
                ));
            }
        }
        let e = Edge::new(AgentId(a), AgentId(b)).map_err(|e| err(&at, e))?;
        if let Some(j) = seen.insert(e, i) {
            return Err(err(
                &at,
                format!("duplicate edge {e}, already declared at {path}[{j}]"),
            ));
        }
        out.push(e);
    }
    Ok(out)
}

impl Template {
    fn new(raw: &RawConfig) -> Result<Self, SpecError> {
        let sys = &raw.system;
        let states = match (&sys.states, sys.chi, sys.agents) {
            (Some(xs), None, None) => StateSource::Fixed(xs.clone()),
            (None, Some(chi), Some(agents)) => StateSource::Random { chi, agents },
            (Some(_), _, _) => {
                return Err(err(
                    "system.states",
                    "give either `states` or `chi` with `agents`, not both",
                ))
            }
            (None, _, _) => {
                return Err(err(
                    "system",
                    "missing `states` (or both `chi` and `agents`)",
                ))
            }
        };
        let n = match &states {
            StateSource::Fixed(xs) => xs.len() as u64,
            StateSource::Random { agents, .. } => *agents,
        };
        if n == 0 {
            return Err(err("system", "at least one agent is required"));
        }
        let edges = match (&sys.edges, sys.shape, sys.random_edges) {
            (Some(pairs), None, None) => EdgeSource::Fixed(edge_list("system.edges", pairs, n)?),
            (None, Some(ShapeName::Random), Some(m)) => {
                EdgeSource::Shape(StartShape::Random { edges: m })
            }
            (None, Some(ShapeName::Random), None) => {
                return Err(err(
                    "system.random_edges",
                    "required when shape = \"random\"",
                ))
            }
            (None, Some(s), None) => EdgeSource::Shape(match s {
                ShapeName::Hole => StartShape::Hole,
                ShapeName::Chain => StartShape::Chain,
                ShapeName::Complete => StartShape::Complete,
                ShapeName::Random => unreachable!("handled above"),
            }),
            (None, Some(_), Some(_)) => {
                return Err(err(
                    "system.random_edges",
                    "only valid with shape = \"random\"",
                ))
            }
            (Some(_), Some(_), _) => {
                return Err(err(
                    "system.edges",
                    "give either `edges` or `shape`, not both",
                ))
            }
            (_, None, Some(_)) => {
                return Err(err(
                    "system.random_edges",
                    "only valid with shape = \"random\"",
                ))
            }
            (None, None, None) => return Err(err("system", "missing `edges` (or `shape`)")),
        };
        let r = &raw.rules;
        let scheduler = match (r.scheduler, &r.script) {
            (SchedulerName::Scripted, Some(s)) => {
                SchedulerKind::Scripted(edge_list_loose("rules.script", s)?)
            }
            (SchedulerName::Scripted, None) => {
                return Err(err(
                    "rules.script",
                    "required when scheduler = \"scripted\"",
                ))
            }
            (_, Some(_)) => {
                return Err(err(
                    "rules.script",
                    "only valid with scheduler = \"scripted\"",
                ))
            }
            (SchedulerName::RoundRobin, None) => SchedulerKind::RoundRobin,
            (SchedulerName::Random, None) => SchedulerKind::Random,
        };
        let max_ticks = raw.run.max_ticks.unwrap_or(DEFAULT_MAX_TICKS);
        if max_ticks == 0 {
            return Err(err("run.max_ticks", "must be at least 1"));
        }
        Ok(Template {
            states,
            edges,
            delta: r.delta,
            scheduler,
            split: r.alpha.map_or(SplitPolicy::Half, SplitPolicy::Fixed),
            max_ticks,
            max_epochs: raw.run.max_epochs,
            detect_period: raw.run.detect_period,
        })
    }

    fn build(
        &self,
        seed: u64,
        upper: u64,
        rules: RuleSet,
        ctx: &str,
    ) -> Result<RunConfig, SpecError> {
        let wrap = |e: SpecError| {
            if ctx.is_empty() {
                e
            } else {
                err(e.path, format!("{} (in {ctx})", e.msg))
            }
        };
        dissensus::events::split_state(upper, self.split).map_err(|e| {
            let path = if matches!(self.split, SplitPolicy::Fixed(_)) && upper >= 2 {
                "rules.alpha"
            } else {
                "system.upper"
            };
            wrap(err(path, e))
        })?;
        let states = match &self.states {
            StateSource::Fixed(xs) => xs
                .iter()
                .enumerate()
                .map(|(i, &x)| (AgentId(i as u64 + 1), x))
                .collect(),
            StateSource::Random { chi, agents } => random_state_map(*agents, *chi, upper, seed)
                .map_err(|e| wrap(err("system.chi", e)))?,
        };
        let n = states.len() as u64;
        let edges = match &self.edges {
            EdgeSource::Fixed(e) => e.clone(),
            EdgeSource::Shape(s) => build_topology(*s, n, seed)
                .map_err(|e| wrap(err("system.shape", e)))?
                .edges()
                .collect(),
        };
        let mut c = RunConfig::new(upper, states, edges);
        c.delta = self.delta;
        c.scheduler = self.scheduler.clone();
        c.death = rules.death;
        c.duplication = rules.duplication;
        c.split = self.split;
        c.seed = seed;
        c.max_ticks = self.max_ticks;
        c.max_epochs = self.max_epochs;
        c.detect_period = self.detect_period;
        c.validate().map_err(|e| {
            let path = match e {
                ConfigError::Split(_) => "system.upper",
                ConfigError::NoAgents
                | ConfigError::StateOutOfRange { .. }
                | ConfigError::ChiTooSmall(_) => "system.states",
                ConfigError::Disconnected
                | ConfigError::DuplicateEdge(_)
                | ConfigError::Graph(_) => "system.edges",
            };
            wrap(err(path, e))
        })?;
        Ok(c)
    }
}

/// Script edges may repeat and may name agents born during the run.
fn edge_list_loose(path: &str, pairs: &[[u64; 2]]) -> Result<Vec<Edge>, SpecError> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &[a, b])| {
            let at = format!("{path}[{i}]");
            if a == 0 || b == 0 {
                return Err(err(&at, "agent ids start at 1"));
            }
            Edge::new(AgentId(a), AgentId(b)).map_err(|e| err(&at, e))
        })
        .collect()
}

/// Parses a schedule file: one edge per line as `a b`, `a,b` or `a-b`.
/// Blank lines and `#` comments are ignored.
pub fn parse_script(text: &str) -> Result<Vec<[u64; 2]>, SpecError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let at = format!("script line {}", i + 1);
        let parts: Vec<&str> = body
            .split(|c: char| c == ',' || c == '-' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .collect();
        let [a, b] = parts.as_slice() else {
            return Err(err(at, format!("expected two agent ids, got `{body}`")));
        };
        let id = |s: &str| {
            s.parse::<u64>()
                .map_err(|e| err(&at, format!("bad agent id `{s}`: {e}")))
        };
        out.push([id(a)?, id(b)?]);
    }
    Ok(out)
}

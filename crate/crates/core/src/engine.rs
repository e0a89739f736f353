//! The discrete-event loop.
//!
//! Gossip ticks run until a state reaches 0 or `B`. The events then resolve
//! at the next tick with no gossip: deaths first, then duplications, each in
//! id order and each as its own epoch. The scheduler rotation restarts from
//! the live edge set after every batch of events.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{
    apply_death, apply_duplication, split_state, CriticalEventRecord, DeathRule, DeathRuleKind,
    DuplicationRule, DuplicationRuleKind, EventContext, EventError, Split, SplitPolicy,
};
use crate::graph::{
    canonical_bytes, canonical_key, is_connected, rank_normalize, summarize, AgentId, ConfigKey,
    Edge, GraphError, Topology, TopologyShape,
};
use crate::protocol::{
    gossip_step, DeltaKind, DeltaPolicy, GossipRecord, ProtocolError, Scheduler, SchedulerKind,
    SystemState, Threshold,
};

pub const DEFAULT_MAX_TICKS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Duplication threshold `B`.
    pub upper: u64,
    pub states: BTreeMap<AgentId, u64>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub delta: DeltaKind,
    #[serde(default)]
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub death: DeathRuleKind,
    #[serde(default)]
    pub duplication: DuplicationRuleKind,
    #[serde(default)]
    pub split: SplitPolicy,
    #[serde(default)]
    pub seed: u64,
    pub max_ticks: u64,
    #[serde(default)]
    pub max_epochs: Option<u64>,
    #[serde(default)]
    pub detect_period: bool,
}

impl RunConfig {
    /// Config with default rules: unit delta, round-robin, star death with
    /// max-state `j*`, partition duplication, half split.
    pub fn new(upper: u64, states: BTreeMap<AgentId, u64>, edges: Vec<Edge>) -> Self {
        RunConfig {
            upper,
            states,
            edges,
            delta: DeltaKind::default(),
            scheduler: SchedulerKind::default(),
            death: DeathRuleKind::default(),
            duplication: DuplicationRuleKind::default(),
            split: SplitPolicy::default(),
            seed: 0,
            max_ticks: DEFAULT_MAX_TICKS,
            max_epochs: None,
            detect_period: false,
        }
    }

    /// States for ids `1..=n` and edges over those ids.
    pub fn from_lists(
        upper: u64,
        states: &[u64],
        edges: &[(u64, u64)],
    ) -> Result<Self, ConfigError> {
        let states = states
            .iter()
            .enumerate()
            .map(|(i, &x)| (AgentId(i as u64 + 1), x))
            .collect();
        let edges = edges
            .iter()
            .map(|&(u, v)| Edge::new(AgentId(u), AgentId(v)).map_err(ConfigError::Graph))
            .collect::<Result<_, _>>()?;
        Ok(Self::new(upper, states, edges))
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        let mut g = Topology::from_parts(self.states.keys().copied(), [])?;
        for &e in &self.edges {
            if !g.add_edge(e)? {
                return Err(ConfigError::DuplicateEdge(e));
            }
        }
        Ok(g)
    }

    pub fn chi(&self) -> u64 {
        self.states.values().sum()
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }

    pub fn validate(&self) -> Result<(Topology, Split), ConfigError> {
        let split = split_state(self.upper, self.split).map_err(ConfigError::Split)?;
        if self.states.is_empty() {
            return Err(ConfigError::NoAgents);
        }
        for (&agent, &value) in &self.states {
            if value > self.upper {
                return Err(ConfigError::StateOutOfRange {
                    agent,
                    value,
                    upper: self.upper,
                });
            }
        }
        let chi = self.chi();
        if chi < 2 {
            return Err(ConfigError::ChiTooSmall(chi));
        }
        let g = self.topology()?;
        if !is_connected(&g) {
            return Err(ConfigError::Disconnected);
        }
        Ok((g, split))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0}")]
    Split(EventError),
    #[error("no agents")]
    NoAgents,
    #[error("agent {agent} has state {value} outside [0, {upper}]")]
    StateOutOfRange {
        agent: AgentId,
        value: u64,
        upper: u64,
    },
    #[error("total state chi = {0} must be at least 2")]
    ChiTooSmall(u64),
    #[error("initial graph is disconnected")]
    Disconnected,
    #[error("duplicate edge {0}")]
    DuplicateEdge(Edge),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("protocol error at tick {tick}: {source}")]
    Protocol { tick: u64, source: ProtocolError },
    #[error("event error at tick {tick}: {source}")]
    Event { tick: u64, source: EventError },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Termination {
    Consensus {
        value: u64,
    },
    MaxTicks,
    MaxEpochs,
    /// Rank-normalized configuration at epoch `start` recurred `length`
    /// epochs later.
    Periodic {
        start: u64,
        length: u64,
    },
    SingleAgent,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Consensus { value } => write!(f, "Consensus at value {value}"),
            Termination::MaxTicks => f.write_str("MaxTicks"),
            Termination::MaxEpochs => f.write_str("MaxEpochs"),
            Termination::Periodic { start, length } => {
                write!(f, "Periodic from epoch {start} with period {length}")
            }
            Termination::SingleAgent => f.write_str("SingleAgent"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceRecord {
    Gossip(GossipRecord),
    Event(CriticalEventRecord),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: u64,
    pub tick: u64,
    pub agents: usize,
    pub edges: usize,
    pub cycles: usize,
    pub states: BTreeMap<AgentId, u64>,
    pub shape: TopologyShape,
}

impl EpochSnapshot {
    fn of(s: &SystemState) -> Self {
        let sum = summarize(&s.topology);
        EpochSnapshot {
            epoch: s.epoch,
            tick: s.tick,
            agents: sum.nodes,
            edges: sum.edges,
            cycles: sum.cycles(),
            states: s.states.clone(),
            shape: sum.shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub config: RunConfig,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<EpochSnapshot>,
    pub termination: Termination,
    pub final_tick: u64,
    pub final_epoch: u64,
    pub final_states: BTreeMap<AgentId, u64>,
    pub final_edges: Vec<Edge>,
}

impl Trace {
    pub fn events(&self) -> impl Iterator<Item = &CriticalEventRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Event(e) => Some(e),
            TraceRecord::Gossip(_) => None,
        })
    }

    pub fn gossip_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r, TraceRecord::Gossip(_)))
            .count()
    }

    /// Epoch of the first duplication, if any.
    pub fn first_duplication_epoch(&self) -> Option<u64> {
        self.events()
            .find(|e| e.kind() == crate::events::PatchKind::Duplication)
            .map(|e| e.epoch)
    }
}

/// Validates the config and builds the state at `t_0 = 0`.
pub fn init(cfg: &RunConfig) -> Result<SystemState, ConfigError> {
    let (g, _) = cfg.validate()?;
    Ok(SystemState::new(cfg.states.clone(), g, cfg.upper).expect("domain matches by construction"))
}

/// True iff all states are equal.
pub fn detect_consensus(s: &SystemState) -> bool {
    let mut it = s.states.values();
    match it.next() {
        Some(first) => it.all(|x| x == first),
        None => true,
    }
}

/// Records configurations seen at critical times and reports the first
/// exact recurrence. Keys are hashes; recurrences are confirmed on the full
/// canonical bytes.
#[derive(Debug, Default)]
pub struct PeriodDetector {
    seen: HashMap<ConfigKey, Vec<(u64, Vec<u8>)>>,
}

impl PeriodDetector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `(start epoch, period)` if `bytes` was already seen.
    pub fn observe(&mut self, epoch: u64, key: ConfigKey, bytes: Vec<u8>) -> Option<(u64, u64)> {
        let bucket = self.seen.entry(key).or_default();
        if let Some((start, _)) = bucket.iter().find(|(_, b)| *b == bytes) {
            return Some((*start, epoch - start));
        }
        bucket.push((epoch, bytes));
        None
    }

    pub fn observe_state(&mut self, s: &SystemState) -> Option<(u64, u64)> {
        let (g, x) = rank_normalize(&s.topology, &s.states);
        self.observe(s.epoch, canonical_key(&g, &x), canonical_bytes(&g, &x))
    }
}

/// Scans a history of `(key, bytes)` sampled at consecutive critical times.
pub fn detect_period(history: &[(ConfigKey, Vec<u8>)]) -> Option<(u64, u64)> {
    let mut det = PeriodDetector::new();
    history
        .iter()
        .enumerate()
        .find_map(|(k, (key, bytes))| det.observe(k as u64, *key, bytes.clone()))
}

/// What one call to [`Simulation::tick`] did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TickOutcome {
    pub gossip: GossipRecord,
    /// Number of critical events resolved after the gossip step; their
    /// records follow it in the trace.
    pub events: usize,
}

pub struct Simulation {
    cfg: RunConfig,
    state: SystemState,
    scheduler: Scheduler,
    delta: DeltaPolicy,
    death: Box<dyn DeathRule>,
    duplication: Box<dyn DuplicationRule>,
    split: Split,
    records: Vec<TraceRecord>,
    snapshots: Vec<EpochSnapshot>,
    periods: Option<PeriodDetector>,
    termination: Option<Termination>,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self, ConfigError> {
        let death = Box::new(cfg.death);
        let duplication = Box::new(cfg.duplication);
        Self::with_rules(cfg, death, duplication)
    }

    /// Uses caller-supplied rules instead of the catalog entries named in
    /// the config. Patches are validated either way.
    pub fn with_rules(
        cfg: RunConfig,
        death: Box<dyn DeathRule>,
        duplication: Box<dyn DuplicationRule>,
    ) -> Result<Self, ConfigError> {
        let (_, split) = cfg.validate()?;
        let state = init(&cfg)?;
        let scheduler = Scheduler::new(&cfg.scheduler, cfg.seed, &state.topology);
        let delta = DeltaPolicy::new(cfg.delta, cfg.seed);
        let periods = cfg.detect_period.then(PeriodDetector::new);
        let mut sim = Simulation {
            cfg,
            state,
            scheduler,
            delta,
            death,
            duplication,
            split,
            records: Vec::new(),
            snapshots: Vec::new(),
            periods,
            termination: None,
        };
        sim.snapshots.push(EpochSnapshot::of(&sim.state));
        Ok(sim)
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn termination(&self) -> Option<Termination> {
        self.termination
    }

    fn pending(&self, candidates: &[AgentId]) -> Vec<(AgentId, Threshold)> {
        let mut out: Vec<(AgentId, Threshold)> = candidates
            .iter()
            .filter_map(|&id| {
                let x = self.state.state(id)?;
                Threshold::of(x, self.state.upper).map(|t| (id, t))
            })
            .collect();
        // Zero before Upper, then id order.
        out.sort_by_key(|&(id, t)| (t, id));
        out.dedup();
        out
    }

    /// Resolves the given threshold crossings at the next tick. Returns the
    /// event records; stops early if only one agent remains.
    fn resolve(&mut self, pending: Vec<(AgentId, Threshold)>) -> Result<usize, SimError> {
        if pending.is_empty() {
            return Ok(0);
        }
        self.state.tick += 1;
        let tick = self.state.tick;
        let wrap = |source| SimError::Event { tick, source };
        let mut out = 0;
        for (subject, kind) in pending {
            if self.state.agent_count() <= 1 {
                break;
            }
            let record = match kind {
                Threshold::Zero => {
                    let ctx = EventContext {
                        state: &self.state,
                        subject,
                        seed: self.cfg.seed,
                    };
                    let patch = self.death.patch(&ctx).map_err(wrap)?;
                    apply_death(&mut self.state, patch).map_err(wrap)?
                }
                Threshold::Upper => {
                    let children = [self.state.mint_id(), self.state.mint_id()];
                    let ctx = EventContext {
                        state: &self.state,
                        subject,
                        seed: self.cfg.seed,
                    };
                    let patch = self
                        .duplication
                        .patch(&ctx, children, self.split)
                        .map_err(wrap)?;
                    apply_duplication(&mut self.state, patch).map_err(wrap)?
                }
            };
            self.snapshots.push(EpochSnapshot::of(&self.state));
            self.records.push(TraceRecord::Event(record));
            out += 1;
        }
        self.scheduler.reset(&self.state.topology);
        Ok(out)
    }

    /// Checks the stopping conditions that apply at a critical time (or t_0).
    fn check_epoch_termination(&mut self) -> Option<Termination> {
        let t = if self.state.agent_count() <= 1 {
            Some(Termination::SingleAgent)
        } else if detect_consensus(&self.state) {
            let value = *self.state.states.values().next().expect("nonempty");
            Some(Termination::Consensus { value })
        } else if let Some((start, length)) = self
            .periods
            .as_mut()
            .and_then(|p| p.observe_state(&self.state))
        {
            Some(Termination::Periodic { start, length })
        } else {
            None
        };
        self.termination = self.termination.or(t);
        t
    }

    /// Resolves thresholds present at t_0 and evaluates initial termination.
    fn start(&mut self) -> Result<(), SimError> {
        let ids: Vec<AgentId> = self.state.states.keys().copied().collect();
        let pending = self.pending(&ids);
        if self.state.agent_count() > 1 {
            self.resolve(pending)?;
        }
        self.check_epoch_termination();
        Ok(())
    }

    /// One scheduler selection and gossip update, followed by any critical
    /// events it triggers.
    pub fn tick(&mut self) -> Result<TickOutcome, SimError> {
        let tick = self.state.tick;
        let perr = |source| SimError::Protocol { tick, source };
        let edge = self
            .scheduler
            .next_edge(&self.state.topology)
            .map_err(perr)?;
        let (i, j) = edge.endpoints();
        let (xi, xj) = (self.state.states[&i], self.state.states[&j]);
        let delta = self.delta.select(xi, xj, self.state.upper).unwrap_or(0);
        let gossip = gossip_step(&mut self.state, edge, delta).map_err(perr)?;
        self.records.push(TraceRecord::Gossip(gossip));
        let pending = self.pending(&[i, j]);
        let events = self.resolve(pending)?;
        Ok(TickOutcome { gossip, events })
    }

    pub fn run(mut self) -> Result<Trace, SimError> {
        self.start()?;
        while self.termination.is_none() {
            if self.state.tick >= self.cfg.max_ticks {
                self.termination = Some(Termination::MaxTicks);
                break;
            }
            let outcome = self.tick()?;
            if outcome.events > 0 {
                if self.check_epoch_termination().is_some() {
                    break;
                }
                if self.cfg.max_epochs.is_some_and(|m| self.state.epoch >= m) {
                    self.termination = Some(Termination::MaxEpochs);
                }
            }
        }
        Ok(self.into_trace())
    }

    fn into_trace(self) -> Trace {
        Trace {
            final_tick: self.state.tick,
            final_epoch: self.state.epoch,
            final_edges: self.state.topology.edges().collect(),
            final_states: self.state.states,
            config: self.cfg,
            records: self.records,
            snapshots: self.snapshots,
            termination: self.termination.expect("run sets a termination"),
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<Trace, SimError> {
    Simulation::new(cfg.clone())?.run()
}

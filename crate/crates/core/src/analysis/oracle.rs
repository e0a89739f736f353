//! Exhaustive exploration of every schedule and rule choice for tiny systems.
//!
//! Configurations are memoized on their rank-normalized form plus a flag for
//! "a duplication has happened", which is all the protocol's future depends
//! on when every scheduler choice and every rule choice is enumerated. Only
//! stable configurations (no agent at a threshold) are stored; a transition
//! is one gossip step followed by the full event batch it triggers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ConfigError, RunConfig, Trace, TraceRecord};
use crate::events::{
    apply_death, apply_duplication, death_clique_rule, death_star_rule, dup_full_rule,
    dup_partition_with_pick, max_state_neighbor, validate_against, DeathRuleKind,
    DuplicationRuleKind, JStarPolicy, PatchKind, Split, TopologyPatch,
};
use crate::graph::{canonical_bytes, is_connected, rank_normalize, AgentId, Topology};
use crate::protocol::{DeltaKind, SystemState, Threshold};

use super::checks::apply_recorded;

pub const DEFAULT_MAX_CONFIGS: usize = 1_000_000;

/// Violations kept with their full path; the rest are only counted.
const KEPT_VIOLATIONS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleOptions {
    /// Maximum number of gossip transitions from the start; `None` explores
    /// the whole reachable configuration graph.
    pub horizon: Option<usize>,
    pub max_configs: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            horizon: None,
            max_configs: DEFAULT_MAX_CONFIGS,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("the oracle enumerates unit steps only, config uses {0:?} delta")]
    NonUnitDelta(DeltaKind),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state-space budget exceeded after {count} configurations")]
    BudgetExceeded { count: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub agents: usize,
    pub value: u64,
    pub after_duplication: bool,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleViolation {
    pub property: String,
    pub detail: String,
    /// Start configuration, then one entry per transition.
    pub path: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleReport {
    pub explored: usize,
    pub transitions: u64,
    pub max_depth: usize,
    /// True when the horizon stopped the search before the graph was exhausted.
    pub truncated: bool,
    pub consensus: Vec<ConsensusConfig>,
    pub consensus_before_duplication: usize,
    pub single_agent: usize,
    pub checks: BTreeMap<String, u64>,
    pub violation_count: u64,
    pub violations: Vec<OracleViolation>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    pub fn merge(&mut self, other: OracleReport) {
        self.explored += other.explored;
        self.transitions += other.transitions;
        self.max_depth = self.max_depth.max(other.max_depth);
        self.truncated |= other.truncated;
        self.consensus.extend(other.consensus);
        self.consensus_before_duplication += other.consensus_before_duplication;
        self.single_agent += other.single_agent;
        for (k, v) in other.checks {
            *self.checks.entry(k).or_default() += v;
        }
        self.violation_count += other.violation_count;
        let room = KEPT_VIOLATIONS.saturating_sub(self.violations.len());
        self.violations
            .extend(other.violations.into_iter().take(room));
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "oracle: {} configurations, {} transitions, depth {}{}",
            self.explored,
            self.transitions,
            self.max_depth,
            if self.truncated {
                " (horizon reached)"
            } else {
                ""
            }
        )?;
        writeln!(
            f,
            "oracle: {} consensus configurations ({} before the first duplication), {} single-agent ends",
            self.consensus.len(),
            self.consensus_before_duplication,
            self.single_agent
        )?;
        for (name, n) in &self.checks {
            writeln!(f, "oracle check {name}: {n}")?;
        }
        writeln!(f, "oracle: {} violations", self.violation_count)?;
        for v in &self.violations {
            writeln!(f, "VIOLATION {}: {}", v.property, v.detail)?;
            for (k, step) in v.path.iter().enumerate() {
                writeln!(f, "  {k}: {step}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Node {
    g: Topology,
    x: BTreeMap<AgentId, u64>,
    after_dup: bool,
    /// False only for a start configuration with agents at a threshold.
    stable: bool,
}

impl Node {
    fn normalized(
        g: &Topology,
        x: &BTreeMap<AgentId, u64>,
        after_dup: bool,
        stable: bool,
    ) -> (Node, Vec<u8>) {
        let (g, x) = rank_normalize(g, x);
        let mut key = canonical_bytes(&g, &x);
        key.push(u8::from(after_dup) | (u8::from(stable) << 1));
        (
            Node {
                g,
                x,
                after_dup,
                stable,
            },
            key,
        )
    }

    fn all_equal(&self) -> bool {
        let mut it = self.x.values();
        it.next().is_none_or(|first| it.all(|v| v == first))
    }

    fn describe(&self) -> String {
        let xs: Vec<String> = self.x.values().map(u64::to_string).collect();
        let es: Vec<String> = self.g.edges().map(|e| e.to_string()).collect();
        format!(
            "x=[{}] E={{{}}}{}",
            xs.join(","),
            es.join(","),
            if self.after_dup { " dup" } else { "" }
        )
    }

    fn state(&self) -> SystemState {
        SystemState::new(self.x.clone(), self.g.clone(), u64::MAX).expect("matching domains")
    }
}

#[derive(Default)]
struct Tally {
    checks: BTreeMap<&'static str, u64>,
    violations: Vec<(&'static str, String)>,
}

impl Tally {
    fn check(&mut self, name: &'static str, ok: bool, detail: impl FnOnce() -> String) {
        *self.checks.entry(name).or_default() += 1;
        if !ok {
            self.violations.push((name, detail()));
        }
    }
}

struct Succ {
    node: Node,
    key: Vec<u8>,
    step: String,
}

struct Expansion {
    succs: Vec<Succ>,
    tally: Tally,
}

struct Oracle {
    upper: u64,
    chi: u64,
    n0: usize,
    split: Split,
    death: DeathRuleKind,
    dup: DuplicationRuleKind,
}

fn sorted_thresholds(s: &SystemState, ids: &[AgentId], upper: u64) -> Vec<(AgentId, Threshold)> {
    let mut out: Vec<_> = ids
        .iter()
        .filter_map(|&id| Threshold::of(s.state(id)?, upper).map(|t| (id, t)))
        .collect();
    out.sort_by_key(|&(id, t)| (t, id));
    out.dedup();
    out
}

fn subsets(items: &[AgentId], k: usize) -> Vec<BTreeSet<AgentId>> {
    let d = items.len();
    (0u64..1 << d)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| {
            (0..d)
                .filter(|&b| m >> b & 1 == 1)
                .map(|b| items[b])
                .collect()
        })
        .collect()
}

impl Oracle {
    fn new(cfg: &RunConfig) -> Result<(Self, Topology), OracleError> {
        if cfg.delta != DeltaKind::Unit {
            return Err(OracleError::NonUnitDelta(cfg.delta));
        }
        let (g, split) = cfg.validate()?;
        Ok((
            Oracle {
                upper: cfg.upper,
                chi: cfg.chi(),
                n0: cfg.states.len(),
                split,
                death: cfg.death,
                dup: cfg.duplication,
            },
            g,
        ))
    }

    fn with_upper(&self, mut s: SystemState) -> SystemState {
        s.upper = self.upper;
        s.chi = self.chi;
        s
    }

    fn death_patches(&self, s: &SystemState, subject: AgentId) -> Vec<(TopologyPatch, String)> {
        let Some(nbrs) = s.topology.neighbors(subject) else {
            return Vec::new();
        };
        let star = |j: AgentId| {
            death_star_rule(subject, nbrs, j)
                .ok()
                .map(|p| (p, format!("death {} j*={}", subject.0, j.0)))
        };
        match self.death {
            DeathRuleKind::Star(JStarPolicy::MaxState) => max_state_neighbor(s, nbrs)
                .and_then(star)
                .into_iter()
                .collect(),
            DeathRuleKind::Star(JStarPolicy::Random) => {
                nbrs.iter().filter_map(|&j| star(j)).collect()
            }
            DeathRuleKind::Clique => death_clique_rule(subject, nbrs)
                .ok()
                .map(|p| (p, format!("death {} clique", subject.0)))
                .into_iter()
                .collect(),
        }
    }

    fn dup_patches(
        &self,
        s: &SystemState,
        subject: AgentId,
        children: [AgentId; 2],
    ) -> Vec<(TopologyPatch, String)> {
        let Some(nbrs) = s.topology.neighbors(subject) else {
            return Vec::new();
        };
        let [c1, c2] = children;
        match self.dup {
            DuplicationRuleKind::Full => vec![(
                dup_full_rule(subject, nbrs, children, self.split),
                format!("duplication {} -> {},{} full", subject.0, c1.0, c2.0),
            )],
            DuplicationRuleKind::Partition => {
                let items: Vec<AgentId> = nbrs.iter().copied().collect();
                subsets(&items, items.len() / 2)
                    .into_iter()
                    .map(|pick| {
                        let ids: Vec<String> = pick.iter().map(|a| a.0.to_string()).collect();
                        (
                            dup_partition_with_pick(subject, nbrs, children, &pick, self.split),
                            format!(
                                "duplication {} -> {},{} pick={{{}}}",
                                subject.0,
                                c1.0,
                                c2.0,
                                ids.join(",")
                            ),
                        )
                    })
                    .collect()
            }
        }
    }

    fn post_event(
        &self,
        s: &SystemState,
        kind: PatchKind,
        after_dup: bool,
        desc: &str,
        t: &mut Tally,
    ) {
        let n = s.agent_count() as u64;
        let sum = s.sum();
        t.check("conservation", sum == self.chi, || {
            format!("{desc}: sum {sum}")
        });
        t.check("connectivity", is_connected(&s.topology), || {
            format!("{desc}: disconnected")
        });
        let lower = self.chi.div_ceil(self.upper);
        let cap = if after_dup {
            self.chi as i128 - self.upper as i128 + 2
        } else {
            self.chi as i128
        };
        t.check("agent-bounds", lower <= n && i128::from(n) <= cap, || {
            format!("{desc}: n = {n} outside [{lower}, {cap}]")
        });
        if kind == PatchKind::Duplication {
            t.check(
                "post-duplication-sum",
                self.chi + 2 >= n + self.upper,
                || format!("{desc}: chi < n - 2 + B with n = {n}"),
            );
        }
    }

    /// Resolves `pending` in order, branching over every rule choice.
    fn resolve(
        &self,
        s: SystemState,
        pending: &[(AgentId, Threshold)],
        after_dup: bool,
        desc: String,
        out: &mut Vec<(SystemState, bool, String)>,
        t: &mut Tally,
    ) {
        let Some((&(subject, th), rest)) = pending.split_first() else {
            out.push((s, after_dup, desc));
            return;
        };
        if s.agent_count() <= 1 {
            out.push((s, after_dup, desc));
            return;
        }
        let (base, patches, kind) = match th {
            Threshold::Zero => {
                let p = self.death_patches(&s, subject);
                (s, p, PatchKind::Death)
            }
            Threshold::Upper => {
                let mut s2 = s;
                let children = [s2.mint_id(), s2.mint_id()];
                let p = self.dup_patches(&s2, subject, children);
                (s2, p, PatchKind::Duplication)
            }
        };
        t.check("rule-output", !patches.is_empty(), || {
            format!("{desc}: no {kind} patch for agent {}", subject.0)
        });
        for (patch, what) in patches {
            let step = format!("{desc}; {what}");
            let valid = validate_against(&patch, &base);
            t.check("patch-validity", valid.is_ok(), || {
                format!("{step}: {}", valid.clone().unwrap_err())
            });
            let mut s2 = base.clone();
            let applied = match kind {
                PatchKind::Death => apply_death(&mut s2, patch),
                PatchKind::Duplication => apply_duplication(&mut s2, patch),
            };
            match applied {
                Ok(_) => {
                    let dup = after_dup || kind == PatchKind::Duplication;
                    self.post_event(&s2, kind, dup, &step, t);
                    self.resolve(s2, rest, dup, step, out, t);
                }
                Err(e) => {
                    if valid.is_ok() {
                        t.check("patch-validity", false, || format!("{step}: {e}"));
                    }
                }
            }
        }
    }

    fn finish_batch(&self, results: Vec<(SystemState, bool, String)>, succs: &mut Vec<Succ>) {
        for (s, after_dup, step) in results {
            let (node, key) = Node::normalized(&s.topology, &s.states, after_dup, true);
            succs.push(Succ { node, key, step });
        }
    }

    fn expand(&self, node: &Node) -> Expansion {
        let mut t = Tally::default();
        let mut succs = Vec::new();
        let base = self.with_upper(node.state());
        if !node.stable {
            let ids: Vec<AgentId> = node.x.keys().copied().collect();
            let pending = sorted_thresholds(&base, &ids, self.upper);
            let mut out = Vec::new();
            self.resolve(
                base,
                &pending,
                node.after_dup,
                "t0".into(),
                &mut out,
                &mut t,
            );
            self.finish_batch(out, &mut succs);
            return Expansion { succs, tally: t };
        }
        let unequal: Vec<_> = node
            .g
            .edges()
            .filter(|e| node.x[&e.lo()] != node.x[&e.hi()])
            .collect();
        t.check("progress", !unequal.is_empty(), || {
            format!("{}: no edge with unequal states", node.describe())
        });
        let (old_min, old_max) = (
            node.x.values().min().copied(),
            node.x.values().max().copied(),
        );
        let old_norm = base.norm_sq();
        for e in unequal {
            let (i, j) = e.endpoints();
            let mut s = base.clone();
            let (xi, xj) = (s.states[&i], s.states[&j]);
            let (hi, lo) = if xi > xj { (i, j) } else { (j, i) };
            *s.states.get_mut(&hi).expect("endpoint") += 1;
            *s.states.get_mut(&lo).expect("endpoint") -= 1;
            let desc = format!("gossip {e}");
            let (ni, nj) = (s.states[&i], s.states[&j]);
            t.check("state-range", ni <= self.upper && nj <= self.upper, || {
                format!("{desc}: states ({ni}, {nj})")
            });
            let sum = s.sum();
            t.check("conservation", sum == self.chi, || {
                format!("{desc}: sum {sum}")
            });
            let growth = s.norm_sq() as i128 - old_norm as i128;
            let want = 2 + 2 * i128::from(xi.abs_diff(xj));
            t.check("lyapunov-growth", growth == want && growth >= 4, || {
                format!("{desc}: |x|^2 grew by {growth}, expected {want}")
            });
            let (new_min, new_max) = (
                s.states.values().min().copied(),
                s.states.values().max().copied(),
            );
            t.check(
                "monotone-extremes",
                new_min <= old_min && new_max >= old_max,
                || format!("{desc}: extremes {old_min:?}/{old_max:?} -> {new_min:?}/{new_max:?}"),
            );
            let mut vals = s.states.values();
            let first = vals.next().copied();
            let all_eq = vals.all(|&v| Some(v) == first);
            t.check(
                "consensus-timing",
                !(all_eq && s.agent_count() >= 2),
                || format!("{desc}: all states equal after a gossip step"),
            );
            let pending = sorted_thresholds(&s, &[i, j], self.upper);
            let mut out = Vec::new();
            self.resolve(s, &pending, node.after_dup, desc, &mut out, &mut t);
            self.finish_batch(out, &mut succs);
        }
        Expansion { succs, tally: t }
    }

    /// Necessary conditions on a consensus configuration.
    fn consensus_ok(&self, node: &Node) -> Result<(), String> {
        let n = node.x.len() as u64;
        let chi = self.chi;
        if !chi.is_multiple_of(n) {
            return Err(format!("chi = {chi} not divisible by n = {n}"));
        }
        if chi / n >= self.upper {
            return Err(format!("consensus value {} not below B", chi / n));
        }
        if node.after_dup {
            if chi / n < self.split.alpha {
                return Err(format!(
                    "consensus value {} below alpha = {}",
                    chi / n,
                    self.split.alpha
                ));
            }
        } else if n > self.n0 as u64 {
            return Err(format!(
                "n = {n} exceeds n(t0) = {} before any duplication",
                self.n0
            ));
        }
        Ok(())
    }
}

struct Table {
    index: HashMap<Vec<u8>, usize>,
    parent: Vec<Option<(usize, String)>>,
    desc: Vec<String>,
}

impl Table {
    fn path(&self, mut idx: usize) -> Vec<String> {
        let mut out = Vec::new();
        loop {
            match &self.parent[idx] {
                Some((p, step)) => {
                    out.push(format!("{step} => {}", self.desc[idx]));
                    idx = *p;
                }
                None => {
                    out.push(format!("start {}", self.desc[idx]));
                    break;
                }
            }
        }
        out.reverse();
        out
    }
}

fn record_violation(report: &mut OracleReport, property: &str, detail: String, path: Vec<String>) {
    report.violation_count += 1;
    if report.violations.len() < KEPT_VIOLATIONS {
        report.violations.push(OracleViolation {
            property: property.into(),
            detail,
            path,
        });
    }
}

/// Explores every gossip schedule and every rule choice from `cfg`.
pub fn exhaustive_oracle(
    cfg: &RunConfig,
    opts: OracleOptions,
) -> Result<OracleReport, OracleError> {
    let (oracle, g0) = Oracle::new(cfg)?;
    let mut report = OracleReport::default();
    let stable = cfg.states.len() <= 1
        || cfg
            .states
            .values()
            .all(|&v| Threshold::of(v, cfg.upper).is_none());
    let (root, key) = Node::normalized(&g0, &cfg.states, false, stable);
    let mut table = Table {
        index: HashMap::from([(key, 0)]),
        parent: vec![None],
        desc: vec![root.describe()],
    };
    let mut frontier: Vec<(usize, Node)> = Vec::new();
    {
        let mut t = Tally::default();
        let n = root.x.len() as u64;
        let lower = oracle.chi.div_ceil(oracle.upper);
        t.check("agent-bounds", lower <= n && n <= oracle.chi, || {
            format!("start: n = {n}")
        });
        absorb(&mut report, t, &table, 0);
    }
    if classify(&oracle, &root, 0, 0, &table, &mut report) {
        frontier.push((0, root));
    }
    let mut depth = 0;
    while !frontier.is_empty() {
        if opts.horizon.is_some_and(|h| depth >= h) {
            report.truncated = true;
            break;
        }
        let expansions: Vec<Expansion> =
            frontier.par_iter().map(|(_, n)| oracle.expand(n)).collect();
        let mut next = Vec::new();
        for ((parent, _), exp) in frontier.iter().zip(expansions) {
            absorb(&mut report, exp.tally, &table, *parent);
            for s in exp.succs {
                report.transitions += 1;
                if table.index.contains_key(&s.key) {
                    continue;
                }
                let idx = table.parent.len();
                table.index.insert(s.key, idx);
                table.parent.push(Some((*parent, s.step)));
                table.desc.push(s.node.describe());
                if table.parent.len() > opts.max_configs {
                    return Err(OracleError::BudgetExceeded {
                        count: table.parent.len(),
                    });
                }
                if classify(&oracle, &s.node, idx, depth + 1, &table, &mut report) {
                    next.push((idx, s.node));
                }
            }
        }
        depth += 1;
        report.max_depth = depth;
        frontier = next;
    }
    report.explored = table.parent.len();
    Ok(report)
}

fn absorb(report: &mut OracleReport, t: Tally, table: &Table, at: usize) {
    for (name, n) in t.checks {
        *report.checks.entry(name.into()).or_default() += n;
    }
    for (name, detail) in t.violations {
        record_violation(report, name, detail, table.path(at));
    }
}

/// Records terminal configurations; returns true if `node` should be expanded.
fn classify(
    oracle: &Oracle,
    node: &Node,
    idx: usize,
    depth: usize,
    table: &Table,
    report: &mut OracleReport,
) -> bool {
    if !node.stable {
        return true;
    }
    if node.x.len() <= 1 {
        report.single_agent += 1;
        return false;
    }
    if !node.all_equal() {
        return true;
    }
    let value = *node.x.values().next().expect("nonempty");
    report.consensus.push(ConsensusConfig {
        agents: node.x.len(),
        value,
        after_duplication: node.after_dup,
        depth,
    });
    if !node.after_dup {
        report.consensus_before_duplication += 1;
    }
    *report
        .checks
        .entry("consensus-conditions".into())
        .or_default() += 1;
    if let Err(why) = oracle.consensus_ok(node) {
        record_violation(report, "consensus-conditions", why, table.path(idx));
    }
    false
}

/// Replays a simulator trace through the oracle's transition relation and
/// returns the number of transitions matched.
pub fn trace_is_oracle_path(trace: &Trace) -> Result<usize, String> {
    let cfg = &trace.config;
    let (oracle, g0) = Oracle::new(cfg).map_err(|e| e.to_string())?;
    let mut g = g0;
    let mut x = cfg.states.clone();
    let mut after_dup = false;
    let stable = x.len() <= 1 || x.values().all(|&v| Threshold::of(v, cfg.upper).is_none());
    let (mut cur, _) = Node::normalized(&g, &x, false, stable);
    let mut matched = 0;
    let mut k = 0;
    let records = &trace.records;
    // Initial batch, if any, precedes the first gossip record.
    let mut first = true;
    while k < records.len() || (first && !cur.stable) {
        let mut step = String::from("t0");
        if !(first && !cur.stable) {
            let TraceRecord::Gossip(gr) = &records[k] else {
                return Err(format!("record {k}: expected a gossip record"));
            };
            k += 1;
            if gr.delta == 0 {
                continue;
            }
            x.insert(gr.edge.lo(), gr.lo_state);
            x.insert(gr.edge.hi(), gr.hi_state);
            step = format!("gossip {}", gr.edge);
        }
        first = false;
        while let Some(TraceRecord::Event(ev)) = records.get(k) {
            apply_recorded(&mut g, ev).map_err(|e| format!("record {k}: {e}"))?;
            x.remove(&ev.patch.subject);
            if let crate::events::PatchDetail::Duplication {
                children, split, ..
            } = &ev.patch.detail
            {
                x.insert(children[0], split.alpha);
                x.insert(children[1], split.beta);
                after_dup = true;
            }
            k += 1;
        }
        let (next, key) = Node::normalized(&g, &x, after_dup, true);
        let exp = oracle.expand(&cur);
        if !exp.succs.iter().any(|s| s.key == key) {
            return Err(format!(
                "transition {matched} ({step}) from {} to {} is not an oracle transition",
                cur.describe(),
                next.describe()
            ));
        }
        matched += 1;
        cur = next;
    }
    Ok(matched)
}

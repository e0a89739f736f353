//! Invariant checkers over recorded traces.
//!
//! Every checker replays the trace from the embedded config and never reads
//! engine internals, so a corrupted or hand-edited trace is judged on what it
//! actually records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::{Check, InvariantReport};
use crate::engine::{RunConfig, Termination, Trace, TraceRecord};
use crate::events::{
    CriticalEventRecord, DeathRuleKind, DuplicationRuleKind, PatchDetail, PatchKind, Split,
};
use crate::graph::{
    canonical_bytes, classify, rank_normalize, summarize, AgentId, ShapeFlag, Topology,
    TopologyShape,
};
use crate::protocol::{delta_cap, SchedulerKind, Threshold};

/// Replayed configuration with incremental sum, squared norm and a value
/// histogram for O(B) min/max queries.
struct Replay {
    g: Topology,
    x: BTreeMap<AgentId, u64>,
    hist: Vec<u64>,
    sum: u64,
    norm: u128,
    max_id: u64,
}

impl Replay {
    fn new(cfg: &RunConfig, g: Topology) -> Self {
        let mut hist = vec![0u64; cfg.upper as usize + 1];
        for &v in cfg.states.values() {
            hist[v.min(cfg.upper) as usize] += 1;
        }
        Replay {
            g,
            x: cfg.states.clone(),
            hist,
            sum: cfg.chi(),
            norm: cfg
                .states
                .values()
                .map(|&v| u128::from(v) * u128::from(v))
                .sum(),
            max_id: cfg.states.keys().next_back().map_or(0, |a| a.0),
        }
    }

    fn set(&mut self, id: AgentId, v: u64) {
        if let Some(old) = self.x.insert(id, v) {
            self.unaccount(old);
        }
        self.sum += v;
        self.norm += u128::from(v) * u128::from(v);
        if let Some(slot) = self.hist.get_mut(v as usize) {
            *slot += 1;
        }
        self.max_id = self.max_id.max(id.0);
    }

    fn remove(&mut self, id: AgentId) {
        if let Some(old) = self.x.remove(&id) {
            self.unaccount(old);
        }
    }

    fn unaccount(&mut self, old: u64) {
        self.sum -= old;
        self.norm -= u128::from(old) * u128::from(old);
        if let Some(slot) = self.hist.get_mut(old as usize) {
            *slot -= 1;
        }
    }

    fn n(&self) -> usize {
        self.x.len()
    }

    fn min(&self) -> Option<u64> {
        self.hist.iter().position(|&c| c > 0).map(|v| v as u64)
    }

    fn max(&self) -> Option<u64> {
        self.hist.iter().rposition(|&c| c > 0).map(|v| v as u64)
    }

    fn all_equal(&self) -> bool {
        self.min()
            .is_some_and(|m| self.hist[m as usize] == self.n() as u64)
    }

    fn pending(&self, ids: &[AgentId], upper: u64) -> Vec<(AgentId, Threshold)> {
        let mut out: Vec<_> = ids
            .iter()
            .filter_map(|&id| Threshold::of(*self.x.get(&id)?, upper).map(|t| (id, t)))
            .collect();
        out.sort_by_key(|&(id, t)| (t, id));
        out.dedup();
        out
    }
}

/// Applies an event's recorded patch to a topology (no validation).
pub(crate) fn apply_recorded(g: &mut Topology, ev: &CriticalEventRecord) -> Result<(), String> {
    let p = &ev.patch;
    g.remove_node(p.subject).map_err(|e| e.to_string())?;
    if let PatchDetail::Duplication { children, .. } = &p.detail {
        for &c in children {
            g.add_node(c).map_err(|e| e.to_string())?;
        }
    }
    for &e in &ev.new_edges {
        g.add_edge(e).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn threshold_of(kind: PatchKind) -> Threshold {
    match kind {
        PatchKind::Death => Threshold::Zero,
        PatchKind::Duplication => Threshold::Upper,
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Evaluates the protocol, event and engine invariants over a trace.
pub fn check_trace(trace: &Trace) -> InvariantReport {
    let cfg = &trace.config;
    let (g0, split) = match cfg.validate() {
        Ok(v) => v,
        Err(e) => {
            let mut c = Check::new("config");
            c.assert(false, Some(0), Some(0), || e.to_string());
            return InvariantReport {
                results: vec![c.finish("")],
                notes: Vec::new(),
            };
        }
    };
    TraceChecker::new(trace, g0, split).run()
}

struct TraceChecker<'a> {
    trace: &'a Trace,
    upper: u64,
    chi: u64,
    n0: usize,
    split: Split,
    round_robin: bool,
    r: Replay,

    conservation: Check,
    state_range: Check,
    record_sequence: Check,
    gossip_rule: Check,
    lyapunov: Check,
    monotone: Check,
    threshold_resolution: Check,
    patch_validity: Check,
    agent_count_step: Check,
    symmetry: Check,
    connectivity: Check,
    agent_bounds: Check,
    post_dup_sum: Check,
    consensus_timing: Check,
    consensus_conditions: Check,
    inter_event: Check,
    termination: Check,
    final_state: Check,
    snapshots: Check,

    now: u64,
    epoch: u64,
    pending: Vec<(AgentId, Threshold)>,
    batch_tick: Option<u64>,
    batch_open: bool,
    first_dup: Option<u64>,
    window: (u64, u64),
    gossip_run: u64,
    window_edges: u64,
    last_consensus: Option<(u64, u64)>,
    epoch_bytes: Option<BTreeMap<u64, Vec<u8>>>,
    aborted: Option<String>,
}

impl<'a> TraceChecker<'a> {
    fn new(trace: &'a Trace, g0: Topology, split: Split) -> Self {
        let cfg = &trace.config;
        let r = Replay::new(cfg, g0);
        let window = (r.min().unwrap_or(0), r.max().unwrap_or(0));
        let window_edges = r.g.edge_count() as u64;
        TraceChecker {
            trace,
            upper: cfg.upper,
            chi: cfg.chi(),
            n0: cfg.states.len(),
            split,
            round_robin: cfg.scheduler == SchedulerKind::RoundRobin,
            r,
            conservation: Check::new("conservation"),
            state_range: Check::new("state-range"),
            record_sequence: Check::new("record-sequence"),
            gossip_rule: Check::new("gossip-rule"),
            lyapunov: Check::new("lyapunov-growth"),
            monotone: Check::new("monotone-extremes"),
            threshold_resolution: Check::new("threshold-resolution"),
            patch_validity: Check::new("patch-validity"),
            agent_count_step: Check::new("agent-count-step"),
            symmetry: Check::new("adjacency-symmetry"),
            connectivity: Check::new("connectivity"),
            agent_bounds: Check::new("agent-bounds"),
            post_dup_sum: Check::new("post-duplication-sum"),
            consensus_timing: Check::new("consensus-timing"),
            consensus_conditions: Check::new("consensus-conditions"),
            inter_event: Check::new("inter-event-bound"),
            termination: Check::new("termination"),
            final_state: Check::new("final-state"),
            snapshots: Check::new("snapshot-agreement"),
            now: 0,
            epoch: 0,
            pending: Vec::new(),
            batch_tick: None,
            batch_open: false,
            first_dup: None,
            window,
            gossip_run: 0,
            window_edges,
            last_consensus: None,
            epoch_bytes: matches!(trace.termination, Termination::Periodic { .. })
                .then(BTreeMap::new),
            aborted: None,
        }
    }

    fn run(mut self) -> InvariantReport {
        if !self.round_robin {
            self.inter_event.skip("scheduler is not round-robin");
        }
        if self.trace.snapshots.is_empty() {
            self.snapshots.skip("no snapshots supplied");
        }
        self.epoch_checks();
        let ids: Vec<AgentId> = self.r.x.keys().copied().collect();
        if self.r.n() > 1 {
            self.pending = self.r.pending(&ids, self.upper);
        }
        if self.pending.is_empty() {
            self.batch_end();
        } else {
            self.batch_tick = Some(1);
            self.batch_open = true;
        }
        for rec in &self.trace.records {
            match rec {
                TraceRecord::Gossip(g) => {
                    if self.batch_open {
                        self.batch_end();
                    }
                    self.gossip(g);
                }
                TraceRecord::Event(ev) => self.event(ev),
            }
            if self.aborted.is_some() {
                break;
            }
        }
        if self.aborted.is_none() && self.batch_open {
            self.batch_end();
        }
        self.finish()
    }

    fn abort(&mut self, why: String) {
        self.aborted.get_or_insert(why);
    }

    fn gossip(&mut self, g: &crate::protocol::GossipRecord) {
        let tick = Some(g.tick);
        let epoch = Some(self.epoch);
        let expected = self.now;
        self.record_sequence
            .assert(g.tick == expected, tick, epoch, || {
                format!("gossip tick {} but expected {expected}", g.tick)
            });
        if !self.pending.is_empty() {
            let p = self.pending.clone();
            self.threshold_resolution.assert(false, tick, epoch, || {
                format!("gossip before resolving {p:?}")
            });
            self.pending.clear();
        }
        let (i, j) = g.edge.endpoints();
        if !self.r.g.has_edge(g.edge) {
            self.gossip_rule.assert(false, tick, epoch, || {
                format!("edge {} not in graph", g.edge)
            });
            self.abort(format!("gossip on missing edge {}", g.edge));
            return;
        }
        let (xi, xj) = (self.r.x[&i], self.r.x[&j]);
        let upper = self.upper;
        let (want_i, want_j, ok_delta) = if xi == xj {
            (xi, xj, g.delta == 0)
        } else {
            let d = g.delta;
            let ok = d >= 1 && d <= delta_cap(xi, xj, upper);
            if xi > xj {
                (xi.wrapping_add(d), xj.wrapping_sub(d), ok)
            } else {
                (xi.wrapping_sub(d), xj.wrapping_add(d), ok)
            }
        };
        self.gossip_rule.assert(
            ok_delta && (g.lo_state, g.hi_state) == (want_i, want_j),
            tick,
            epoch,
            || {
                format!(
                    "edge {} states ({xi}, {xj}) delta {} recorded ({}, {}), expected ({want_i}, {want_j})",
                    g.edge, g.delta, g.lo_state, g.hi_state
                )
            },
        );
        let norm_before = self.r.norm;
        self.r.set(i, g.lo_state);
        self.r.set(j, g.hi_state);
        self.now = g.tick + 1;

        let (sum, chi) = (self.r.sum, self.chi);
        self.conservation.assert(sum == chi, tick, epoch, || {
            format!("sum {sum} != chi {chi}")
        });
        let (a, b) = (g.lo_state, g.hi_state);
        self.state_range
            .assert(a <= upper && b <= upper, tick, epoch, || {
                format!("states ({a}, {b}) outside [0, {upper}]")
            });

        let growth = self.r.norm as i128 - norm_before as i128;
        if xi == xj {
            self.lyapunov.assert(growth == 0, tick, epoch, || {
                format!("equal-state step changed |x|^2 by {growth}")
            });
        } else {
            let d = i128::from(g.delta);
            let diff = i128::from(xi.abs_diff(xj));
            let want = 2 * d * d + 2 * d * diff;
            self.lyapunov
                .assert(growth == want && growth >= 4, tick, epoch, || {
                    format!("|x|^2 grew by {growth}, expected {want} (>= 4)")
                });
        }

        let (lo, hi) = (self.r.min().unwrap_or(0), self.r.max().unwrap_or(0));
        let (wlo, whi) = self.window;
        self.monotone
            .assert(lo <= wlo && hi >= whi, tick, epoch, || {
                format!("extremes moved from [{wlo}, {whi}] to [{lo}, {hi}] without an event")
            });
        self.window = (lo.min(wlo), hi.max(whi));

        if self.r.n() >= 2 {
            let eq = self.r.all_equal();
            self.consensus_timing
                .assert(!eq, Some(self.now), epoch, || {
                    "all states equal after a gossip tick".into()
                });
        }
        if self.round_robin {
            self.gossip_run += 1;
            let (run, e, chi) = (self.gossip_run, self.window_edges, self.chi);
            self.inter_event.assert(
                4 * u128::from(run) <= u128::from(e) * u128::from(upper * chi + 4),
                tick,
                epoch,
                || format!("{run} gossip ticks since last event with |E| = {e}"),
            );
        }
        self.pending = self.r.pending(&[i, j], upper);
        if !self.pending.is_empty() {
            self.batch_tick = Some(self.now + 1);
            self.batch_open = true;
        }
    }

    fn event(&mut self, ev: &CriticalEventRecord) {
        let p = &ev.patch;
        let kind = p.kind();
        let tick = Some(ev.tick);
        let epoch = Some(ev.epoch);
        self.batch_open = true;
        let (cur_epoch, bt) = (self.epoch, self.batch_tick);
        self.record_sequence.assert(
            ev.epoch == cur_epoch + 1 && Some(ev.tick) == bt,
            tick,
            epoch,
            || {
                format!(
                    "event epoch {} tick {} after epoch {cur_epoch}, expected tick {bt:?}",
                    ev.epoch, ev.tick
                )
            },
        );
        let expected = self.pending.first().copied();
        self.threshold_resolution.assert(
            expected == Some((p.subject, threshold_of(kind))),
            tick,
            epoch,
            || format!("{kind} of agent {} but pending {:?}", p.subject, expected),
        );
        if !self.pending.is_empty() {
            self.pending.remove(0);
        }
        let Some(&xs) = self.r.x.get(&p.subject) else {
            self.patch_validity.assert(false, tick, epoch, || {
                format!("subject {} not present", p.subject)
            });
            self.abort(format!("event on absent agent {}", p.subject));
            return;
        };
        let want_state = match kind {
            PatchKind::Death => 0,
            PatchKind::Duplication => self.upper,
        };
        let (g, upper, max_id, split) = (&self.r.g, self.upper, self.r.max_id, self.split);
        let validation = crate::events::validate_patch(
            p,
            g.neighbors(p.subject),
            |c| !g.contains_node(c) && c.0 > max_id,
            upper,
        );
        let split_ok = match &p.detail {
            PatchDetail::Duplication { split: s, .. } => *s == split,
            PatchDetail::Death { .. } => true,
        };
        self.patch_validity.assert(
            xs == want_state
                && split_ok
                && validation
                    .as_ref()
                    .is_ok_and(|derived| *derived == ev.new_edges),
            tick,
            epoch,
            || {
                if xs != want_state {
                    format!("{kind} of agent {} at state {xs}", p.subject)
                } else if let Err(v) = &validation {
                    v.to_string()
                } else if !split_ok {
                    format!("split differs from configured {split:?}")
                } else {
                    "recorded new edges differ from the patch".into()
                }
            },
        );

        let n_before = self.r.n();
        if let Err(e) = apply_recorded(&mut self.r.g, ev) {
            self.patch_validity.assert(false, tick, epoch, || e.clone());
            self.abort(e);
            return;
        }
        self.r.remove(p.subject);
        if let PatchDetail::Duplication {
            children, split, ..
        } = &p.detail
        {
            self.r.set(children[0], split.alpha);
            self.r.set(children[1], split.beta);
        }
        self.epoch = ev.epoch;
        self.now = ev.tick;
        let n = self.r.n();
        let step_ok = match kind {
            PatchKind::Death => n + 1 == n_before,
            PatchKind::Duplication => n == n_before + 1,
        };
        self.agent_count_step.assert(step_ok, tick, epoch, || {
            format!("{kind} took n from {n_before} to {n}")
        });
        let sym = self
            .r
            .g
            .check_symmetry_local(p.subject, &p.neighbors, &ev.new_edges);
        self.symmetry
            .assert(sym, tick, epoch, || "asymmetric adjacency".into());
        let (sum, chi) = (self.r.sum, self.chi);
        self.conservation.assert(sum == chi, tick, epoch, || {
            format!("sum {sum} != chi {chi} after {kind}")
        });
        if kind == PatchKind::Duplication {
            self.first_dup.get_or_insert(ev.epoch);
            self.post_dup_sum
                .assert(chi + 2 >= n as u64 + self.upper, tick, epoch, || {
                    format!("chi {chi} < n - 2 + B with n = {n}")
                });
        }
        self.epoch_checks();
        if self.r.n() <= 1 {
            self.pending.clear();
        }
    }

    /// Checks evaluated at every epoch snapshot (t_0 and after each event).
    fn epoch_checks(&mut self) {
        let tick = Some(self.now);
        let epoch = Some(self.epoch);
        let n = self.r.n() as u64;
        let (chi, upper) = (self.chi, self.upper);
        let summary = summarize(&self.r.g);
        let conn = summary.connected();
        self.connectivity.assert(conn, tick, epoch, || {
            format!("graph with {n} agents is disconnected")
        });
        let lower = ceil_div(chi, upper);
        let (cap, regime) = match self.first_dup {
            None => (chi as i128, "chi"),
            Some(_) => (chi as i128 - upper as i128 + 2, "chi - B + 2"),
        };
        self.agent_bounds
            .assert(lower <= n && i128::from(n) <= cap, tick, epoch, || {
                format!("n = {n} outside [{lower}, {cap}] ({regime} regime)")
            });
        let snaps = &self.trace.snapshots;
        if !snaps.is_empty() {
            let snap = snaps.get(self.epoch as usize);
            let r = &self.r;
            let ok = snap.is_some_and(|s| {
                s.epoch == self.epoch
                    && s.tick == self.now
                    && s.states == r.x
                    && s.agents == summary.nodes
                    && s.edges == summary.edges
                    && s.cycles == summary.cycles()
                    && s.shape == summary.shape
            });
            self.snapshots.assert(ok, tick, epoch, || {
                "snapshot differs from replayed configuration".into()
            });
        }
    }

    /// Checks evaluated once all events of a critical time have resolved.
    fn batch_end(&mut self) {
        self.batch_open = false;
        self.batch_tick = None;
        let tick = Some(self.now);
        let epoch = Some(self.epoch);
        if !self.pending.is_empty() {
            let p = std::mem::take(&mut self.pending);
            self.threshold_resolution.assert(false, tick, epoch, || {
                format!("unresolved thresholds {p:?}")
            });
        }
        let n = self.r.n() as u64;
        let upper = self.upper;
        if n >= 2 {
            let (lo, hi) = (self.r.min().unwrap_or(0), self.r.max().unwrap_or(0));
            self.state_range
                .assert(lo >= 1 && hi < upper, tick, epoch, || {
                    format!(
                        "states span [{lo}, {hi}] after events, expected within [1, {}]",
                        upper - 1
                    )
                });
            if self.r.all_equal() {
                let v = lo;
                self.last_consensus = Some((self.epoch, v));
                let chi = self.chi;
                let regime_ok = match self.first_dup {
                    None => n <= self.n0 as u64,
                    Some(_) => chi >= self.split.alpha * n,
                };
                self.consensus_conditions.assert(
                    chi.is_multiple_of(n) && chi / n < upper && regime_ok,
                    tick,
                    epoch,
                    || format!("consensus at {v} with n = {n}, chi = {chi}"),
                );
            } else {
                self.last_consensus = None;
            }
        }
        self.window = (self.r.min().unwrap_or(0), self.r.max().unwrap_or(0));
        self.gossip_run = 0;
        self.window_edges = self.r.g.edge_count() as u64;
        if let Some(map) = self.epoch_bytes.as_mut() {
            let (g, x) = rank_normalize(&self.r.g, &self.r.x);
            map.insert(self.epoch, canonical_bytes(&g, &x));
        }
    }

    fn finish(mut self) -> InvariantReport {
        let t = self.trace;
        let tick = Some(t.final_tick);
        let epoch = Some(t.final_epoch);
        if let Some(why) = self.aborted.take() {
            self.final_state
                .assert(false, tick, epoch, || format!("replay aborted: {why}"));
            self.termination.skip("replay aborted");
        } else {
            let r = &self.r;
            let edges_ok = r.g.edges().eq(t.final_edges.iter().copied());
            let (now, ep) = (self.now, self.epoch);
            self.final_state.assert(
                r.x == t.final_states && edges_ok && now == t.final_tick && ep == t.final_epoch,
                tick,
                epoch,
                || format!("replay ends at tick {now} epoch {ep} with a different configuration"),
            );
            let n = r.n();
            let cfg = &t.config;
            let ok = match t.termination {
                Termination::Consensus { value } => {
                    self.last_consensus.is_some_and(|(_, v)| v == value)
                        && r.x.values().all(|&x| x == value)
                }
                Termination::SingleAgent => n == 1,
                Termination::MaxTicks => t.final_tick >= cfg.max_ticks,
                Termination::MaxEpochs => cfg.max_epochs.is_some_and(|m| t.final_epoch >= m),
                Termination::Periodic { start, length } => {
                    self.epoch_bytes.as_ref().is_some_and(|m| {
                        length > 0
                            && start + length == t.final_epoch
                            && m.get(&start).is_some()
                            && m.get(&start) == m.get(&(start + length))
                    })
                }
            };
            let term = t.termination;
            self.termination.assert(ok, tick, epoch, || {
                format!("recorded termination {term:?} is not supported by the replay")
            });
            if !t.snapshots.is_empty() {
                let (want, got) = (self.epoch as usize + 1, t.snapshots.len());
                self.snapshots.assert(got == want, tick, epoch, || {
                    format!("{got} snapshots for {want} epochs")
                });
            }
        }
        let results = vec![
            self.conservation.finish("no records"),
            self.state_range.finish("no records"),
            self.record_sequence.finish("no records"),
            self.gossip_rule.finish("no gossip ticks"),
            self.lyapunov.finish("no gossip ticks"),
            self.monotone.finish("no gossip ticks"),
            self.threshold_resolution.finish("no critical events"),
            self.patch_validity.finish("no critical events"),
            self.agent_count_step.finish("no critical events"),
            self.symmetry.finish("no critical events"),
            self.connectivity.finish("no epochs"),
            self.agent_bounds.finish("no epochs"),
            self.post_dup_sum.finish("no duplication"),
            self.consensus_timing
                .finish("no gossip ticks with two or more agents"),
            self.consensus_conditions
                .finish("no consensus configuration reached"),
            self.inter_event.finish("no gossip ticks"),
            self.termination.finish(""),
            self.final_state.finish(""),
            self.snapshots.finish("no snapshots supplied"),
        ];
        InvariantReport {
            results,
            notes: Vec::new(),
        }
    }
}

/// Topology summary at one epoch, rebuilt from the recorded patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochView {
    pub epoch: u64,
    pub tick: u64,
    pub kind: Option<PatchKind>,
    pub agents: usize,
    pub edges: usize,
    pub cycles: usize,
    pub shape: TopologyShape,
}

pub fn epoch_views(trace: &Trace) -> Result<Vec<EpochView>, String> {
    let mut g = trace.config.topology().map_err(|e| e.to_string())?;
    let view = |g: &Topology, epoch, tick, kind| {
        let s = summarize(g);
        EpochView {
            epoch,
            tick,
            kind,
            agents: s.nodes,
            edges: s.edges,
            cycles: s.cycles(),
            shape: s.shape,
        }
    };
    let mut out = vec![view(&g, 0, 0, None)];
    for ev in trace.events() {
        apply_recorded(&mut g, ev)?;
        out.push(view(&g, ev.epoch, ev.tick, Some(ev.kind())));
    }
    Ok(out)
}

/// Asserts that `flag` holds at every epoch. Requires the duplication rule
/// that keeps that shape invariant and a start topology of that shape.
pub fn check_topology_invariance(trace: &Trace, flag: ShapeFlag) -> InvariantReport {
    let name: &'static str = match flag {
        ShapeFlag::Hole => "shape-invariance:hole",
        ShapeFlag::Chain => "shape-invariance:chain",
        ShapeFlag::Complete => "shape-invariance:complete",
    };
    let mut check = Check::new(name);
    let dup = trace.config.duplication;
    let needed = match flag {
        ShapeFlag::Hole | ShapeFlag::Chain => DuplicationRuleKind::Partition,
        ShapeFlag::Complete => DuplicationRuleKind::Full,
    };
    let mut notes = Vec::new();
    if dup != needed {
        check.skip(format!(
            "{flag} invariance requires {needed} duplication, run used {dup}"
        ));
    } else {
        match epoch_views(trace) {
            Err(e) => {
                check.assert(false, None, None, || format!("replay failed: {e}"));
            }
            Ok(views) if !flag.holds(views[0].shape) => {
                check.skip(format!("start topology is not {flag}"));
            }
            Ok(views) => {
                // Deaths can shrink the network below the shape's minimum
                // size. The shape is then undefined, and whatever grows back
                // no longer starts from it, so inspection stops there.
                let cut = views
                    .iter()
                    .position(|v| v.agents < flag.min_nodes())
                    .unwrap_or(views.len());
                if let Some(v) = views.get(cut) {
                    notes.push(format!(
                        "{name}: below {} agents at epoch {}, later epochs not inspected",
                        flag.min_nodes(),
                        v.epoch
                    ));
                }
                let views = &views[..cut];
                for v in views {
                    check.assert(flag.holds(v.shape), Some(v.tick), Some(v.epoch), || {
                        format!(
                            "shape {} with {} agents and {} edges",
                            v.shape, v.agents, v.edges
                        )
                    });
                }
                notes.push(format!("{name}: {} epochs inspected", views.len()));
            }
        }
    }
    InvariantReport {
        results: vec![check.finish("no epochs")],
        notes,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub epoch: u64,
    pub edges: usize,
    pub cycles: usize,
}

/// Per agent-count series of edge and cycle counts, from the warm-up epoch on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensitySeries {
    pub warmup: u64,
    pub series: BTreeMap<usize, Vec<DensityPoint>>,
}

pub fn density_series(views: &[EpochView], warmup: u64) -> DensitySeries {
    let mut series: BTreeMap<usize, Vec<DensityPoint>> = BTreeMap::new();
    for v in views.iter().filter(|v| v.epoch >= warmup) {
        series.entry(v.agents).or_default().push(DensityPoint {
            epoch: v.epoch,
            edges: v.edges,
            cycles: v.cycles,
        });
    }
    DensitySeries { warmup, series }
}

fn is_partition_star(trace: &Trace) -> bool {
    trace.config.duplication == DuplicationRuleKind::Partition
        && matches!(trace.config.death, DeathRuleKind::Star(_))
}

/// Edge and cycle counts along each equal-agent-count subsequence must not
/// increase after the warm-up epoch (default: first duplication). Per-event
/// edge deltas are +1 on duplication and at most -1 on death.
pub fn check_density_trend(trace: &Trace, warmup: Option<u64>) -> InvariantReport {
    let mut edge_step = Check::new("edge-step");
    let mut cycle_step = Check::new("cycle-step");
    let mut density = Check::new("density-per-n");
    let mut cycles = Check::new("cycles-per-n");
    let mut notes = Vec::new();
    if !is_partition_star(trace) {
        let why = format!(
            "requires partition duplication with star death, run used {} + {}",
            trace.config.duplication, trace.config.death
        );
        for c in [&mut edge_step, &mut cycle_step, &mut density, &mut cycles] {
            c.skip(why.clone());
        }
    } else {
        match epoch_views(trace) {
            Err(e) => {
                edge_step.assert(false, None, None, || format!("replay failed: {e}"));
            }
            Ok(views) => {
                for w in views.windows(2) {
                    let (a, b) = (&w[0], &w[1]);
                    let de = b.edges as i64 - a.edges as i64;
                    let ok = match b.kind {
                        Some(PatchKind::Duplication) => de == 1,
                        Some(PatchKind::Death) => de <= -1,
                        None => true,
                    };
                    edge_step.assert(ok, Some(b.tick), Some(b.epoch), || {
                        format!("{:?} changed |E| by {de}", b.kind)
                    });
                    cycle_step.assert(b.cycles <= a.cycles, Some(b.tick), Some(b.epoch), || {
                        format!("cycle count rose from {} to {}", a.cycles, b.cycles)
                    });
                }
                let start = warmup.or_else(|| trace.first_duplication_epoch());
                match start {
                    None => {
                        density.skip("no duplication occurred and no warm-up epoch given");
                        cycles.skip("no duplication occurred and no warm-up epoch given");
                    }
                    Some(t_hat) => {
                        let ds = density_series(&views, t_hat);
                        for (n, pts) in &ds.series {
                            for w in pts.windows(2) {
                                let (a, b) = (w[0], w[1]);
                                density.assert(b.edges <= a.edges, None, Some(b.epoch), || {
                                    format!(
                                        "n = {n}: |E| rose from {} (epoch {}) to {}",
                                        a.edges, a.epoch, b.edges
                                    )
                                });
                                cycles.assert(b.cycles <= a.cycles, None, Some(b.epoch), || {
                                    format!(
                                        "n = {n}: cycles rose from {} (epoch {}) to {}",
                                        a.cycles, a.epoch, b.cycles
                                    )
                                });
                            }
                        }
                        notes.push(format!(
                            "density: warm-up epoch {t_hat}, {} agent counts observed",
                            ds.series.len()
                        ));
                    }
                }
                let (first, last) = (&views[0], &views[views.len() - 1]);
                notes.push(format!(
                    "density: cycles {} -> {}, edges {} -> {} over {} epochs{}",
                    first.cycles,
                    last.cycles,
                    first.edges,
                    last.edges,
                    views.len() - 1,
                    if last.cycles <= 1 {
                        " (at most one cycle left)"
                    } else {
                        ""
                    }
                ));
            }
        }
    }
    InvariantReport {
        results: vec![
            edge_step.finish("no critical events"),
            cycle_step.finish("no critical events"),
            density.finish("no repeated agent count after warm-up"),
            cycles.finish("no repeated agent count after warm-up"),
        ],
        notes,
    }
}

/// Shape flags that held at epoch 0 and are expected to persist under the
/// configured duplication rule.
pub fn applicable_shapes(trace: &Trace) -> Vec<ShapeFlag> {
    let Ok(g) = trace.config.topology() else {
        return Vec::new();
    };
    let Ok(shape) = classify(&g) else {
        return Vec::new();
    };
    let candidates: &[ShapeFlag] = match trace.config.duplication {
        DuplicationRuleKind::Partition => &[ShapeFlag::Hole, ShapeFlag::Chain],
        DuplicationRuleKind::Full => &[ShapeFlag::Complete],
    };
    candidates
        .iter()
        .copied()
        .filter(|f| f.holds(shape))
        .collect()
}

/// `check_trace` plus every applicable shape and density check.
pub fn full_report(trace: &Trace) -> InvariantReport {
    let mut report = check_trace(trace);
    for flag in applicable_shapes(trace) {
        report.extend(check_topology_invariance(trace, flag));
    }
    report.extend(check_density_trend(trace, None));
    report
}

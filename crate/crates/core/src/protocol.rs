//! Quantized gossip dynamics between critical events.
//!
//! One edge is selected per tick; if its endpoint states differ, the larger
//! state gains `delta` and the smaller loses the same amount. The transfer is
//! capped by `min(x_loser, B - x_winner)` so a threshold is hit exactly rather
//! than overshot.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AgentId, Edge, GraphError, Topology};
use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("scheduled edge {0} is not in the current edge set")]
    EdgeNotPresent(Edge),
    #[error("no edges to schedule")]
    NoEdges,
    #[error("agent {agent} would leave [0, {upper}] with value {value}")]
    StateOutOfRange {
        agent: AgentId,
        value: i128,
        upper: u64,
    },
    #[error("state domain does not match the topology's node set")]
    DomainMismatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// The configuration the protocol evolves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemState {
    pub states: BTreeMap<AgentId, u64>,
    pub topology: Topology,
    /// Integer time `r`.
    pub tick: u64,
    /// Number of critical events resolved so far.
    pub epoch: u64,
    /// Conserved total of all states.
    pub chi: u64,
    /// Duplication threshold `B`.
    pub upper: u64,
    next_id: u64,
}

impl SystemState {
    pub fn new(
        states: BTreeMap<AgentId, u64>,
        topology: Topology,
        upper: u64,
    ) -> Result<Self, ProtocolError> {
        if !topology.nodes().eq(states.keys().copied()) {
            return Err(ProtocolError::DomainMismatch);
        }
        let chi = states.values().sum();
        let next_id = states.keys().next_back().map_or(1, |id| id.0 + 1);
        Ok(SystemState {
            states,
            topology,
            tick: 0,
            epoch: 0,
            chi,
            upper,
            next_id,
        })
    }

    /// Allocates a fresh, never-used agent id.
    pub fn mint_id(&mut self) -> AgentId {
        let id = AgentId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn agent_count(&self) -> usize {
        self.states.len()
    }

    pub fn sum(&self) -> u64 {
        self.states.values().sum()
    }

    /// Squared Euclidean norm of the state vector.
    pub fn norm_sq(&self) -> u128 {
        self.states
            .values()
            .map(|&x| u128::from(x) * u128::from(x))
            .sum()
    }

    pub fn state(&self, id: AgentId) -> Option<u64> {
        self.states.get(&id).copied()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaKind {
    /// Always transfer one quantum.
    #[default]
    Unit,
    /// Transfer the largest admissible amount.
    Max,
    /// Uniform draw over the admissible range from a seeded stream.
    Uniform,
}

/// Largest admissible transfer between two unequal states.
pub fn delta_cap(xi: u64, xj: u64, upper: u64) -> u64 {
    let (lo, hi) = if xi < xj { (xi, xj) } else { (xj, xi) };
    lo.min(upper.saturating_sub(hi))
}

#[derive(Clone, Debug)]
pub struct DeltaPolicy {
    kind: DeltaKind,
    rng: Option<ChaCha8Rng>,
}

impl DeltaPolicy {
    pub fn new(kind: DeltaKind, seed: u64) -> Self {
        let rng = (kind == DeltaKind::Uniform).then(|| rng::stream(seed, Purpose::Delta, 0));
        DeltaPolicy { kind, rng }
    }

    pub fn kind(&self) -> DeltaKind {
        self.kind
    }

    /// Returns `None` when the states are equal (no transfer).
    pub fn select(&mut self, xi: u64, xj: u64, upper: u64) -> Option<u64> {
        if xi == xj {
            return None;
        }
        let cap = delta_cap(xi, xj, upper);
        assert!(
            cap >= 1,
            "delta cap below 1 for states ({xi}, {xj}) with B = {upper}"
        );
        Some(match self.kind {
            DeltaKind::Unit => 1,
            DeltaKind::Max => cap,
            DeltaKind::Uniform => self
                .rng
                .as_mut()
                .expect("uniform policy owns a stream")
                .random_range(1..=cap),
        })
    }
}

/// Outcome of one gossip tick, as recorded in traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GossipRecord {
    pub tick: u64,
    pub edge: Edge,
    /// Zero when the endpoint states were equal.
    pub delta: u64,
    /// State of `edge.lo()` after the update.
    pub lo_state: u64,
    /// State of `edge.hi()` after the update.
    pub hi_state: u64,
}

/// Applies one gossip update on `edge` and advances the tick.
pub fn gossip_step(
    s: &mut SystemState,
    edge: Edge,
    delta: u64,
) -> Result<GossipRecord, ProtocolError> {
    if !s.topology.has_edge(edge) {
        return Err(ProtocolError::EdgeNotPresent(edge));
    }
    let (i, j) = edge.endpoints();
    let (xi, xj) = (s.states[&i], s.states[&j]);
    let (ni, nj, delta) = match xi.cmp(&xj) {
        std::cmp::Ordering::Equal => (xi as i128, xj as i128, 0),
        std::cmp::Ordering::Greater => (
            xi as i128 + delta as i128,
            xj as i128 - delta as i128,
            delta,
        ),
        std::cmp::Ordering::Less => (
            xi as i128 - delta as i128,
            xj as i128 + delta as i128,
            delta,
        ),
    };
    for (agent, value) in [(i, ni), (j, nj)] {
        if value < 0 || value > s.upper as i128 {
            return Err(ProtocolError::StateOutOfRange {
                agent,
                value,
                upper: s.upper,
            });
        }
    }
    let record = GossipRecord {
        tick: s.tick,
        edge,
        delta,
        lo_state: ni as u64,
        hi_state: nj as u64,
    };
    s.states.insert(i, ni as u64);
    s.states.insert(j, nj as u64);
    s.tick += 1;
    Ok(record)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    #[default]
    RoundRobin,
    Random,
    /// Explicit edge sequence; falls back to round-robin once exhausted.
    Scripted(Vec<Edge>),
}

// One per simulation, so the unboxed rng costs nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum SchedulerState {
    RoundRobin(VecDeque<Edge>),
    Random {
        rng: ChaCha8Rng,
        edges: Vec<Edge>,
    },
    Scripted {
        script: Vec<Edge>,
        pos: usize,
        fallback: VecDeque<Edge>,
    },
}

#[derive(Clone, Debug)]
pub struct Scheduler {
    state: SchedulerState,
}

impl Scheduler {
    pub fn new(kind: &SchedulerKind, seed: u64, g: &Topology) -> Self {
        let state = match kind {
            SchedulerKind::RoundRobin => SchedulerState::RoundRobin(g.edges().collect()),
            SchedulerKind::Random => SchedulerState::Random {
                rng: rng::stream(seed, Purpose::Scheduler, 0),
                edges: g.edges().collect(),
            },
            SchedulerKind::Scripted(script) => SchedulerState::Scripted {
                script: script.clone(),
                pos: 0,
                fallback: g.edges().collect(),
            },
        };
        Scheduler { state }
    }

    /// Rebuilds the edge queue from the live edge set, in canonical order.
    /// Called after every batch of critical events.
    pub fn reset(&mut self, g: &Topology) {
        match &mut self.state {
            SchedulerState::RoundRobin(q) | SchedulerState::Scripted { fallback: q, .. } => {
                q.clear();
                q.extend(g.edges());
            }
            SchedulerState::Random { edges, .. } => {
                edges.clear();
                edges.extend(g.edges());
            }
        }
    }

    pub fn next_edge(&mut self, g: &Topology) -> Result<Edge, ProtocolError> {
        let edge = match &mut self.state {
            SchedulerState::RoundRobin(q) => rotate(q)?,
            SchedulerState::Random { rng, edges } => {
                *edges.choose(rng).ok_or(ProtocolError::NoEdges)?
            }
            SchedulerState::Scripted {
                script,
                pos,
                fallback,
            } => match script.get(*pos) {
                Some(&e) => {
                    *pos += 1;
                    e
                }
                None => rotate(fallback)?,
            },
        };
        if !g.has_edge(edge) {
            return Err(ProtocolError::EdgeNotPresent(edge));
        }
        Ok(edge)
    }

    /// Round-robin queue contents, front first. `None` for other kinds.
    pub fn queue(&self) -> Option<Vec<Edge>> {
        match &self.state {
            SchedulerState::RoundRobin(q) => Some(q.iter().copied().collect()),
            _ => None,
        }
    }
}

fn rotate(q: &mut VecDeque<Edge>) -> Result<Edge, ProtocolError> {
    let e = q.pop_front().ok_or(ProtocolError::NoEdges)?;
    q.push_back(e);
    Ok(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threshold {
    Zero,
    Upper,
}

impl Threshold {
    pub fn of(x: u64, upper: u64) -> Option<Threshold> {
        if x == 0 {
            Some(Threshold::Zero)
        } else if x >= upper {
            Some(Threshold::Upper)
        } else {
            None
        }
    }
}

/// Every agent at 0 or at `B`, in id order.
pub fn detect_thresholds(s: &SystemState) -> Vec<(AgentId, Threshold)> {
    s.states
        .iter()
        .filter_map(|(&id, &x)| Threshold::of(x, s.upper).map(|t| (id, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::shapes;
    use proptest::prelude::*;

    fn a(i: u64) -> AgentId {
        AgentId(i)
    }

    fn e(i: u64, j: u64) -> Edge {
        Edge::new(a(i), a(j)).unwrap()
    }

    fn state(xs: &[u64], g: Topology, upper: u64) -> SystemState {
        let x = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| (a(i as u64 + 1), v))
            .collect();
        SystemState::new(x, g, upper).unwrap()
    }

    #[test]
    fn select_delta_examples() {
        let mut unit = DeltaPolicy::new(DeltaKind::Unit, 0);
        let mut max = DeltaPolicy::new(DeltaKind::Max, 0);
        assert_eq!(unit.select(6, 2, 8), Some(1));
        assert_eq!(max.select(6, 2, 8), Some(2));
        assert_eq!(max.select(7, 5, 8), Some(1));
        assert_eq!(max.select(4, 4, 8), None);
    }

    #[test]
    fn gossip_examples() {
        let mut s = state(&[6, 2], shapes::path(2), 8);
        let r = gossip_step(&mut s, e(1, 2), 1).unwrap();
        assert_eq!((r.lo_state, r.hi_state, s.tick), (7, 1, 1));

        let mut s = state(&[4, 4], shapes::path(2), 8);
        let r = gossip_step(&mut s, e(1, 2), 3).unwrap();
        assert_eq!((r.lo_state, r.hi_state, r.delta), (4, 4, 0));

        let mut s = state(&[7, 1], shapes::path(2), 8);
        gossip_step(&mut s, e(1, 2), 1).unwrap();
        assert_eq!(
            detect_thresholds(&s),
            vec![(a(1), Threshold::Upper), (a(2), Threshold::Zero)]
        );
    }

    #[test]
    fn gossip_errors() {
        let mut s = state(&[6, 2, 3], shapes::path(3), 8);
        assert_eq!(
            gossip_step(&mut s, e(1, 3), 1),
            Err(ProtocolError::EdgeNotPresent(e(1, 3)))
        );
        assert!(matches!(
            gossip_step(&mut s, e(1, 2), 3),
            Err(ProtocolError::StateOutOfRange { .. })
        ));
        assert_eq!(s.states[&a(1)], 6, "failed step must not mutate");
    }

    #[test]
    fn detect_threshold_examples() {
        assert!(detect_thresholds(&state(&[4, 6], shapes::path(2), 8)).is_empty());
        assert_eq!(
            detect_thresholds(&state(&[0, 5, 5], shapes::cycle(3), 8)),
            vec![(a(1), Threshold::Zero)]
        );
    }

    #[test]
    fn round_robin_rotates() {
        let g = shapes::path(3);
        let mut sch = Scheduler::new(&SchedulerKind::RoundRobin, 0, &g);
        assert_eq!(sch.next_edge(&g).unwrap(), e(1, 2));
        assert_eq!(sch.queue().unwrap(), vec![e(2, 3), e(1, 2)]);
    }

    #[test]
    fn round_robin_covers_every_edge_twice_in_two_periods() {
        let g = shapes::complete(5);
        let mut sch = Scheduler::new(&SchedulerKind::RoundRobin, 0, &g);
        // Start mid-rotation.
        for _ in 0..3 {
            sch.next_edge(&g).unwrap();
        }
        let mut counts = BTreeMap::new();
        for _ in 0..2 * g.edge_count() {
            *counts.entry(sch.next_edge(&g).unwrap()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), g.edge_count());
        assert!(counts.values().all(|&c| c >= 2));
    }

    #[test]
    fn random_scheduler_replays() {
        let g = shapes::complete(6);
        let draw = |seed| {
            let mut sch = Scheduler::new(&SchedulerKind::Random, seed, &g);
            (0..50)
                .map(|_| sch.next_edge(&g).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn scripted_scheduler_then_fallback() {
        let g = shapes::path(3);
        let mut sch = Scheduler::new(&SchedulerKind::Scripted(vec![e(2, 3), e(2, 3)]), 0, &g);
        let got: Vec<_> = (0..4).map(|_| sch.next_edge(&g).unwrap()).collect();
        assert_eq!(got, vec![e(2, 3), e(2, 3), e(1, 2), e(2, 3)]);

        let mut bad = Scheduler::new(&SchedulerKind::Scripted(vec![e(1, 3)]), 0, &g);
        assert_eq!(
            bad.next_edge(&g),
            Err(ProtocolError::EdgeNotPresent(e(1, 3)))
        );
    }

    #[test]
    fn empty_edge_set() {
        let g = Topology::from_parts([a(1)], []).unwrap();
        let mut sch = Scheduler::new(&SchedulerKind::RoundRobin, 0, &g);
        assert_eq!(sch.next_edge(&g), Err(ProtocolError::NoEdges));
    }

    proptest! {
        #[test]
        fn delta_respects_cap(xi in 1u64..40, xj in 1u64..40, extra in 1u64..20, seed: u64) {
            let upper = xi.max(xj) + extra;
            prop_assume!(xi != xj);
            for kind in [DeltaKind::Unit, DeltaKind::Max, DeltaKind::Uniform] {
                let mut p = DeltaPolicy::new(kind, seed);
                let d = p.select(xi, xj, upper).unwrap();
                prop_assert!(d >= 1);
                prop_assert!(d <= xi.min(xj));
                prop_assert!(d <= upper - xi.max(xj));
            }
        }

        /// Conservation and the squared-norm growth identity for one step.
        #[test]
        fn step_conserves_and_diverges(xi in 1u64..30, xj in 1u64..30, extra in 1u64..10, seed: u64) {
            let upper = xi.max(xj) + extra;
            let mut s = state(&[xi, xj], shapes::path(2), upper);
            let before_sum = s.sum();
            let before_norm = s.norm_sq();
            let mut p = DeltaPolicy::new(DeltaKind::Uniform, seed);
            let d = p.select(xi, xj, upper).unwrap_or(0);
            gossip_step(&mut s, e(1, 2), d).unwrap();
            prop_assert_eq!(s.sum(), before_sum);
            let growth = s.norm_sq() - before_norm;
            if xi == xj {
                prop_assert_eq!(growth, 0);
            } else {
                let diff = u128::from(xi.abs_diff(xj));
                let d = u128::from(d);
                prop_assert_eq!(growth, 2 * d * d + 2 * d * diff);
                prop_assert!(growth >= 4);
            }
        }
    }
}

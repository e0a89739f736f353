//! Death and duplication events.
//!
//! A rule turns the neighborhood of the critical agent into a
//! [`TopologyPatch`]: the involved agents, the inheritance sets and (for a
//! duplication) the children and their state split. Every patch goes through
//! [`validate_patch`] before it touches the graph, so any function producing a
//! patch can serve as a rule.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index;
use rand::seq::IteratorRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{is_locally_connected, AgentId, Edge, GraphError};
use crate::protocol::SystemState;
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Split {
    pub alpha: u64,
    pub beta: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    #[default]
    Half,
    /// Explicit larger share `alpha`; `beta = B - alpha`.
    Fixed(u64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("split_state requires B >= 2, got B = {0}")]
    UpperTooSmall(u64),
    #[error("fixed split alpha = {alpha} is invalid for B = {upper}: need B - alpha <= alpha < B")]
    BadFixedSplit { alpha: u64, upper: u64 },
    #[error("agent {0} has no neighbors")]
    IsolatedAgent(AgentId),
    #[error("agent {0} is not in the graph")]
    UnknownAgent(AgentId),
    #[error("agent {agent} has state {state}, expected {expected} for this event")]
    WrongState {
        agent: AgentId,
        state: u64,
        expected: u64,
    },
    #[error("rule violation: {0}")]
    Rule(#[from] Violation),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Splits the threshold value between two children, larger share first.
pub fn split_state(upper: u64, policy: SplitPolicy) -> Result<Split, EventError> {
    if upper < 2 {
        return Err(EventError::UpperTooSmall(upper));
    }
    match policy {
        SplitPolicy::Half => Ok(Split {
            alpha: upper.div_ceil(2),
            beta: upper / 2,
        }),
        SplitPolicy::Fixed(alpha) => {
            if alpha >= upper || alpha < upper - alpha {
                return Err(EventError::BadFixedSplit { alpha, upper });
            }
            Ok(Split {
                alpha,
                beta: upper - alpha,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchKind {
    Death,
    Duplication,
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchKind::Death => "death",
            PatchKind::Duplication => "duplication",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PatchDetail {
    Death {
        /// New neighbors each former neighbor inherits from the dead agent.
        #[serde(with = "pairs")]
        inherited: BTreeMap<AgentId, BTreeSet<AgentId>>,
    },
    Duplication {
        /// Fresh ids; the first (lower) child receives `alpha`.
        children: [AgentId; 2],
        child_neighbors: [BTreeSet<AgentId>; 2],
        split: Split,
    },
}

/// Serializes an id-keyed map as a list of pairs; map keys do not survive
/// the buffered path used for flattened, tagged content.
mod pairs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<AgentId, BTreeSet<AgentId>>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        ser.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<AgentId, BTreeSet<AgentId>>, D::Error> {
        Vec::<(AgentId, BTreeSet<AgentId>)>::deserialize(de).map(|v| v.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyPatch {
    /// The agent at a threshold.
    pub subject: AgentId,
    /// Neighborhood of the subject when the event fires.
    pub neighbors: BTreeSet<AgentId>,
    #[serde(flatten)]
    pub detail: PatchDetail,
}

impl TopologyPatch {
    pub fn kind(&self) -> PatchKind {
        match self.detail {
            PatchDetail::Death { .. } => PatchKind::Death,
            PatchDetail::Duplication { .. } => PatchKind::Duplication,
        }
    }

    /// Agents involved in the event and still present afterwards.
    pub fn involved(&self) -> BTreeSet<AgentId> {
        let mut lam = self.neighbors.clone();
        if let PatchDetail::Duplication { children, .. } = &self.detail {
            lam.extend(children.iter().copied());
        }
        lam
    }

    /// Edges added by the event, sorted and without duplicates. Self-pairs
    /// are dropped here and reported by [`validate_patch`].
    pub fn new_edges(&self) -> Vec<Edge> {
        let cap = match &self.detail {
            PatchDetail::Death { inherited } => inherited.values().map(BTreeSet::len).sum(),
            PatchDetail::Duplication {
                child_neighbors, ..
            } => child_neighbors[0].len() + child_neighbors[1].len(),
        };
        let mut out = Vec::with_capacity(cap);
        let mut push = |j: AgentId, set: &BTreeSet<AgentId>| {
            out.extend(set.iter().filter_map(|&i| Edge::new(j, i).ok()));
        };
        match &self.detail {
            PatchDetail::Death { inherited } => inherited.iter().for_each(|(&j, set)| push(j, set)),
            PatchDetail::Duplication {
                children,
                child_neighbors,
                ..
            } => children
                .iter()
                .zip(child_neighbors)
                .for_each(|(&c, set)| push(c, set)),
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Named patch conditions, in the order they are checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    NeighborhoodMismatch,
    InheritanceDomain,
    InheritanceRange,
    DeathCoverage,
    ChildNotFresh,
    ChildOrder,
    ChildNeighborRange,
    DuplicationCoverage,
    SplitOrder,
    SplitSum,
    LocalConnectivity,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::NeighborhoodMismatch => "neighborhood-mismatch",
            Condition::InheritanceDomain => "inheritance-domain",
            Condition::InheritanceRange => "inheritance-range",
            Condition::DeathCoverage => "death-coverage",
            Condition::ChildNotFresh => "child-not-fresh",
            Condition::ChildOrder => "child-order",
            Condition::ChildNeighborRange => "child-neighbor-range",
            Condition::DuplicationCoverage => "duplication-coverage",
            Condition::SplitOrder => "split-order",
            Condition::SplitSum => "split-sum",
            Condition::LocalConnectivity => "local-connectivity",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{}: {detail}", condition.name())]
pub struct Violation {
    pub condition: Condition,
    pub detail: String,
}

fn violation(condition: Condition, detail: impl Into<String>) -> Violation {
    Violation {
        condition,
        detail: detail.into(),
    }
}

fn fmt_set(s: &BTreeSet<AgentId>) -> String {
    let ids: Vec<String> = s.iter().map(|a| a.to_string()).collect();
    format!("{{{}}}", ids.join(","))
}

/// Checks a patch against the graph it will be applied to and the threshold
/// `upper`. Returns the patch's new edges, or the first violated condition.
pub fn validate_patch(
    p: &TopologyPatch,
    subject_neighbors: Option<&BTreeSet<AgentId>>,
    is_fresh: impl Fn(AgentId) -> bool,
    upper: u64,
) -> Result<Vec<Edge>, Violation> {
    match subject_neighbors {
        Some(n) if *n == p.neighbors => {}
        Some(n) => {
            return Err(violation(
                Condition::NeighborhoodMismatch,
                format!(
                    "patch neighbors {} differ from graph neighbors {} of agent {}",
                    fmt_set(&p.neighbors),
                    fmt_set(n),
                    p.subject
                ),
            ))
        }
        None => {
            return Err(violation(
                Condition::NeighborhoodMismatch,
                format!("subject {} is not in the graph", p.subject),
            ))
        }
    }
    // Death involves exactly the neighborhood; only duplication adds ids.
    let lam = match &p.detail {
        PatchDetail::Death { .. } => Cow::Borrowed(&p.neighbors),
        PatchDetail::Duplication { .. } => Cow::Owned(p.involved()),
    };
    match &p.detail {
        PatchDetail::Death { inherited } => {
            if !inherited.keys().copied().eq(p.neighbors.iter().copied()) {
                return Err(violation(
                    Condition::InheritanceDomain,
                    "inheritance sets must be given for exactly the dead agent's neighbors",
                ));
            }
            for (j, set) in inherited {
                if set.contains(j) || !set.is_subset(&p.neighbors) {
                    return Err(violation(
                        Condition::InheritanceRange,
                        format!("agent {j} inherits {} outside N \\ {{{j}}}", fmt_set(set)),
                    ));
                }
            }
            let mut covered: Vec<AgentId> = inherited.values().flatten().copied().collect();
            covered.sort_unstable();
            covered.dedup();
            // A lone neighbor has nobody to link to; its patch is the singleton.
            if p.neighbors.len() >= 2 && !covered.iter().eq(lam.iter()) {
                return Err(violation(
                    Condition::DeathCoverage,
                    format!(
                        "inherited union {} != involved {}",
                        fmt_set(&covered.iter().copied().collect()),
                        fmt_set(&lam)
                    ),
                ));
            }
        }
        PatchDetail::Duplication {
            children,
            child_neighbors,
            split,
        } => {
            let [c1, c2] = *children;
            for c in [c1, c2] {
                if !is_fresh(c) || p.neighbors.contains(&c) || c == p.subject {
                    return Err(violation(
                        Condition::ChildNotFresh,
                        format!("child id {c} is already in use"),
                    ));
                }
            }
            if c1 >= c2 {
                return Err(violation(
                    Condition::ChildOrder,
                    format!("children ({c1}, {c2}) must be distinct and increasing"),
                ));
            }
            for (c, other, set) in [(c1, c2, &child_neighbors[0]), (c2, c1, &child_neighbors[1])] {
                if !set.iter().all(|v| *v == other || p.neighbors.contains(v)) {
                    return Err(violation(
                        Condition::ChildNeighborRange,
                        format!(
                            "child {c} neighbors {} outside N ∪ {{{other}}}",
                            fmt_set(set)
                        ),
                    ));
                }
            }
            // Both sets already lie within lam, so equality reduces to
            // covering.
            let [n1, n2] = child_neighbors;
            let covers = |v: &AgentId| n1.contains(v) || n2.contains(v);
            let full = lam.iter().all(covers);
            let partial = p.neighbors.iter().all(covers)
                && !covers(&c1)
                && !covers(&c2)
                && n1.intersection(n2).next().is_some();
            if !(full || partial) {
                let union: BTreeSet<AgentId> = n1.union(n2).copied().collect();
                return Err(violation(
                    Condition::DuplicationCoverage,
                    format!(
                        "children neighbor union {} neither equals {} nor covers {} with a shared neighbor",
                        fmt_set(&union),
                        fmt_set(&lam),
                        fmt_set(&p.neighbors)
                    ),
                ));
            }
            if !(split.alpha >= split.beta && split.beta > 0) {
                return Err(violation(
                    Condition::SplitOrder,
                    format!(
                        "need alpha >= beta > 0, got ({}, {})",
                        split.alpha, split.beta
                    ),
                ));
            }
            if split.alpha + split.beta != upper {
                return Err(violation(
                    Condition::SplitSum,
                    format!("alpha + beta = {} != B = {upper}", split.alpha + split.beta),
                ));
            }
        }
    }
    let new_edges = p.new_edges();
    match is_locally_connected(&lam, &new_edges) {
        Ok(true) => Ok(new_edges),
        Ok(false) => Err(violation(
            Condition::LocalConnectivity,
            format!("patch over {} is disconnected", fmt_set(&lam)),
        )),
        Err(e) => Err(violation(Condition::LocalConnectivity, e.to_string())),
    }
}

/// Validates `p` against the current system state.
pub fn validate_against(p: &TopologyPatch, s: &SystemState) -> Result<Vec<Edge>, Violation> {
    validate_patch(
        p,
        s.topology.neighbors(p.subject),
        |c| !s.topology.contains_node(c),
        s.upper,
    )
}

fn require_neighbors(neighbors: &BTreeSet<AgentId>, subject: AgentId) -> Result<(), EventError> {
    if neighbors.is_empty() {
        Err(EventError::IsolatedAgent(subject))
    } else {
        Ok(())
    }
}

/// All connections of the dead agent go to one neighbor `jstar`.
pub fn death_star_rule(
    subject: AgentId,
    neighbors: &BTreeSet<AgentId>,
    jstar: AgentId,
) -> Result<TopologyPatch, EventError> {
    require_neighbors(neighbors, subject)?;
    if !neighbors.contains(&jstar) {
        return Err(EventError::UnknownAgent(jstar));
    }
    let inherited = neighbors
        .iter()
        .map(|&j| {
            let set = if j == jstar {
                neighbors.iter().copied().filter(|&i| i != jstar).collect()
            } else {
                BTreeSet::from([jstar])
            };
            (j, set)
        })
        .collect();
    Ok(TopologyPatch {
        subject,
        neighbors: neighbors.clone(),
        detail: PatchDetail::Death { inherited },
    })
}

/// Every pair of former neighbors becomes adjacent.
pub fn death_clique_rule(
    subject: AgentId,
    neighbors: &BTreeSet<AgentId>,
) -> Result<TopologyPatch, EventError> {
    require_neighbors(neighbors, subject)?;
    let inherited = neighbors
        .iter()
        .map(|&j| (j, neighbors.iter().copied().filter(|&i| i != j).collect()))
        .collect();
    Ok(TopologyPatch {
        subject,
        neighbors: neighbors.clone(),
        detail: PatchDetail::Death { inherited },
    })
}

/// Partition duplication with an explicit `pick` for the first child.
pub fn dup_partition_with_pick(
    subject: AgentId,
    neighbors: &BTreeSet<AgentId>,
    children: [AgentId; 2],
    pick: &BTreeSet<AgentId>,
    split: Split,
) -> TopologyPatch {
    let [c1, c2] = children;
    let mut first: BTreeSet<AgentId> = pick.clone();
    first.insert(c2);
    let mut second: BTreeSet<AgentId> = neighbors.difference(pick).copied().collect();
    second.insert(c1);
    TopologyPatch {
        subject,
        neighbors: neighbors.clone(),
        detail: PatchDetail::Duplication {
            children,
            child_neighbors: [first, second],
            split,
        },
    }
}

/// Half the parent's neighbors, drawn at random, go to the first child; the
/// rest go to the second; the children are linked to each other.
pub fn dup_partition_rule<R: Rng + ?Sized>(
    subject: AgentId,
    neighbors: &BTreeSet<AgentId>,
    children: [AgentId; 2],
    split: Split,
    rng: &mut R,
) -> TopologyPatch {
    let all: Vec<AgentId> = neighbors.iter().copied().collect();
    let pick: BTreeSet<AgentId> = index::sample(rng, all.len(), all.len() / 2)
        .into_iter()
        .map(|k| all[k])
        .collect();
    dup_partition_with_pick(subject, neighbors, children, &pick, split)
}

/// Both children inherit every parent connection and link to each other.
pub fn dup_full_rule(
    subject: AgentId,
    neighbors: &BTreeSet<AgentId>,
    children: [AgentId; 2],
    split: Split,
) -> TopologyPatch {
    let [c1, c2] = children;
    let mut first = neighbors.clone();
    first.insert(c2);
    let mut second = neighbors.clone();
    second.insert(c1);
    TopologyPatch {
        subject,
        neighbors: neighbors.clone(),
        detail: PatchDetail::Duplication {
            children,
            child_neighbors: [first, second],
            split,
        },
    }
}

/// Inputs a rule may consult. `seed` and `state.epoch` identify the
/// per-event random stream.
pub struct EventContext<'a> {
    pub state: &'a SystemState,
    pub subject: AgentId,
    pub seed: u64,
}

impl EventContext<'_> {
    pub fn neighbors(&self) -> Result<&BTreeSet<AgentId>, EventError> {
        self.state
            .topology
            .neighbors(self.subject)
            .ok_or(EventError::UnknownAgent(self.subject))
    }

    pub fn stream(&self, purpose: Purpose) -> rand_chacha::ChaCha8Rng {
        rng::stream(self.seed, purpose, self.state.epoch)
    }
}

pub trait DeathRule: Send + Sync {
    fn patch(&self, ctx: &EventContext<'_>) -> Result<TopologyPatch, EventError>;
}

pub trait DuplicationRule: Send + Sync {
    fn patch(
        &self,
        ctx: &EventContext<'_>,
        children: [AgentId; 2],
        split: Split,
    ) -> Result<TopologyPatch, EventError>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JStarPolicy {
    /// Neighbor with the largest state; ties go to the smallest id.
    #[default]
    MaxState,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeathRuleKind {
    Star(JStarPolicy),
    Clique,
}

impl Default for DeathRuleKind {
    fn default() -> Self {
        DeathRuleKind::Star(JStarPolicy::MaxState)
    }
}

impl fmt::Display for DeathRuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeathRuleKind::Star(JStarPolicy::MaxState) => "star",
            DeathRuleKind::Star(JStarPolicy::Random) => "star-random",
            DeathRuleKind::Clique => "clique",
        })
    }
}

pub fn max_state_neighbor(s: &SystemState, neighbors: &BTreeSet<AgentId>) -> Option<AgentId> {
    // Ids iterate in increasing order; ties keep the earlier one.
    neighbors.iter().copied().fold(None, |best, j| match best {
        Some(b) if s.states[&b] >= s.states[&j] => Some(b),
        _ => Some(j),
    })
}

impl DeathRule for DeathRuleKind {
    fn patch(&self, ctx: &EventContext<'_>) -> Result<TopologyPatch, EventError> {
        let neighbors = ctx.neighbors()?;
        require_neighbors(neighbors, ctx.subject)?;
        match self {
            DeathRuleKind::Star(policy) => {
                let jstar = match policy {
                    JStarPolicy::MaxState => max_state_neighbor(ctx.state, neighbors),
                    JStarPolicy::Random => neighbors
                        .iter()
                        .copied()
                        .choose(&mut ctx.stream(Purpose::JStar)),
                }
                .expect("nonempty neighborhood");
                death_star_rule(ctx.subject, neighbors, jstar)
            }
            DeathRuleKind::Clique => death_clique_rule(ctx.subject, neighbors),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuplicationRuleKind {
    #[default]
    Partition,
    Full,
}

impl fmt::Display for DuplicationRuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DuplicationRuleKind::Partition => "partition",
            DuplicationRuleKind::Full => "full",
        })
    }
}

impl DuplicationRule for DuplicationRuleKind {
    fn patch(
        &self,
        ctx: &EventContext<'_>,
        children: [AgentId; 2],
        split: Split,
    ) -> Result<TopologyPatch, EventError> {
        let neighbors = ctx.neighbors()?;
        Ok(match self {
            DuplicationRuleKind::Partition => dup_partition_rule(
                ctx.subject,
                neighbors,
                children,
                split,
                &mut ctx.stream(Purpose::Pick),
            ),
            DuplicationRuleKind::Full => dup_full_rule(ctx.subject, neighbors, children, split),
        })
    }
}

/// A duplication rule paired with a death rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleSet {
    pub duplication: DuplicationRuleKind,
    pub death: DeathRuleKind,
}

impl RuleSet {
    pub const fn new(duplication: DuplicationRuleKind, death: DeathRuleKind) -> Self {
        RuleSet { duplication, death }
    }
}

/// Every duplication rule with every death rule.
pub const CATALOG: [RuleSet; 6] = [
    RuleSet::new(
        DuplicationRuleKind::Partition,
        DeathRuleKind::Star(JStarPolicy::MaxState),
    ),
    RuleSet::new(
        DuplicationRuleKind::Partition,
        DeathRuleKind::Star(JStarPolicy::Random),
    ),
    RuleSet::new(DuplicationRuleKind::Partition, DeathRuleKind::Clique),
    RuleSet::new(
        DuplicationRuleKind::Full,
        DeathRuleKind::Star(JStarPolicy::MaxState),
    ),
    RuleSet::new(
        DuplicationRuleKind::Full,
        DeathRuleKind::Star(JStarPolicy::Random),
    ),
    RuleSet::new(DuplicationRuleKind::Full, DeathRuleKind::Clique),
];

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.duplication, self.death)
    }
}

impl std::str::FromStr for RuleSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CATALOG
            .iter()
            .copied()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| {
                let names: Vec<String> = CATALOG.iter().map(|r| r.to_string()).collect();
                format!(
                    "unknown rule set `{s}`, expected one of {}",
                    names.join(", ")
                )
            })
    }
}

/// One resolved death or duplication.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalEventRecord {
    /// Epoch index after this event.
    pub epoch: u64,
    /// Critical time at which the event resolves.
    pub tick: u64,
    pub patch: TopologyPatch,
    /// Edges added, in canonical order.
    pub new_edges: Vec<Edge>,
}

impl CriticalEventRecord {
    pub fn kind(&self) -> PatchKind {
        self.patch.kind()
    }
}

fn check_state(s: &SystemState, agent: AgentId, expected: u64) -> Result<(), EventError> {
    let state = s.state(agent).ok_or(EventError::UnknownAgent(agent))?;
    if state != expected {
        return Err(EventError::WrongState {
            agent,
            state,
            expected,
        });
    }
    Ok(())
}

/// Removes a dead agent and adds the inherited edges. Survivor states are
/// untouched. The patch is locally connected over a superset of the
/// neighborhood, so a connected graph stays connected.
pub fn apply_death(
    s: &mut SystemState,
    p: TopologyPatch,
) -> Result<CriticalEventRecord, EventError> {
    if p.kind() != PatchKind::Death {
        return Err(violation(Condition::InheritanceDomain, "expected a death patch").into());
    }
    check_state(s, p.subject, 0)?;
    let new_edges = validate_against(&p, s)?;
    s.topology.remove_node(p.subject)?;
    s.states.remove(&p.subject);
    for &e in &new_edges {
        s.topology.add_edge(e)?;
    }
    finish(s, p, new_edges)
}

/// Retires the parent and inserts two children with states `alpha`, `beta`.
pub fn apply_duplication(
    s: &mut SystemState,
    p: TopologyPatch,
) -> Result<CriticalEventRecord, EventError> {
    let (children, split) = match &p.detail {
        PatchDetail::Duplication {
            children, split, ..
        } => (*children, *split),
        PatchDetail::Death { .. } => {
            return Err(violation(Condition::ChildOrder, "expected a duplication patch").into())
        }
    };
    check_state(s, p.subject, s.upper)?;
    let new_edges = validate_against(&p, s)?;
    s.topology.remove_node(p.subject)?;
    s.states.remove(&p.subject);
    for (c, x) in children.into_iter().zip([split.alpha, split.beta]) {
        s.topology.add_node(c)?;
        s.states.insert(c, x);
    }
    for &e in &new_edges {
        s.topology.add_edge(e)?;
    }
    finish(s, p, new_edges)
}

fn finish(
    s: &mut SystemState,
    p: TopologyPatch,
    new_edges: Vec<Edge>,
) -> Result<CriticalEventRecord, EventError> {
    s.epoch += 1;
    Ok(CriticalEventRecord {
        epoch: s.epoch,
        tick: s.tick,
        patch: p,
        new_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{classify, is_connected, shapes, Topology};
    use proptest::prelude::*;

    fn a(i: u64) -> AgentId {
        AgentId(i)
    }

    fn e(i: u64, j: u64) -> Edge {
        Edge::new(a(i), a(j)).unwrap()
    }

    fn set(ids: &[u64]) -> BTreeSet<AgentId> {
        ids.iter().map(|&i| a(i)).collect()
    }

    fn edges(p: &TopologyPatch) -> Vec<Edge> {
        p.new_edges()
    }

    fn state(xs: &[u64], g: Topology, upper: u64) -> SystemState {
        let x = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| (a(i as u64 + 1), v))
            .collect();
        SystemState::new(x, g, upper).unwrap()
    }

    const HALF8: Split = Split { alpha: 4, beta: 4 };

    #[test]
    fn split_examples() {
        assert_eq!(
            split_state(8, SplitPolicy::Half).unwrap(),
            Split { alpha: 4, beta: 4 }
        );
        assert_eq!(
            split_state(9, SplitPolicy::Half).unwrap(),
            Split { alpha: 5, beta: 4 }
        );
        assert_eq!(
            split_state(2, SplitPolicy::Half).unwrap(),
            Split { alpha: 1, beta: 1 }
        );
        assert_eq!(
            split_state(1, SplitPolicy::Half),
            Err(EventError::UpperTooSmall(1))
        );
        assert_eq!(
            split_state(8, SplitPolicy::Fixed(6)).unwrap(),
            Split { alpha: 6, beta: 2 }
        );
        assert!(split_state(8, SplitPolicy::Fixed(8)).is_err());
        assert!(split_state(8, SplitPolicy::Fixed(3)).is_err());
    }

    #[test]
    fn star_rule_examples() {
        let p = death_star_rule(a(9), &set(&[1, 3]), a(1)).unwrap();
        assert_eq!(edges(&p), vec![e(1, 3)]);
        let p = death_star_rule(a(9), &set(&[2, 5, 7]), a(5)).unwrap();
        assert_eq!(edges(&p), vec![e(2, 5), e(5, 7)]);
        assert!(matches!(
            death_star_rule(a(9), &BTreeSet::new(), a(1)),
            Err(EventError::IsolatedAgent(_))
        ));
    }

    #[test]
    fn clique_rule_examples() {
        assert_eq!(
            edges(&death_clique_rule(a(9), &set(&[1, 3])).unwrap()),
            vec![e(1, 3)]
        );
        assert_eq!(
            edges(&death_clique_rule(a(9), &set(&[2, 5, 7])).unwrap()),
            vec![e(2, 5), e(2, 7), e(5, 7)]
        );
        let single = death_clique_rule(a(9), &set(&[4])).unwrap();
        assert!(edges(&single).is_empty());
        assert_eq!(
            validate_patch(&single, Some(&set(&[4])), |_| true, 8).map(drop),
            Ok(())
        );
    }

    /// Oracle: conditions checked directly from their set definitions, over
    /// every neighbor set of size <= 5 drawn from ids 1..=6 and every j*.
    #[test]
    fn star_and_clique_satisfy_death_conditions_exhaustively() {
        for mask in 1u32..(1 << 6) {
            let nbrs: BTreeSet<AgentId> = (0..6)
                .filter(|k| mask & (1 << k) != 0)
                .map(|k| a(k + 1))
                .collect();
            if nbrs.len() > 5 {
                continue;
            }
            let mut patches = vec![death_clique_rule(a(99), &nbrs).unwrap()];
            for &j in &nbrs {
                patches.push(death_star_rule(a(99), &nbrs, j).unwrap());
            }
            for p in patches {
                let PatchDetail::Death { inherited } = &p.detail else {
                    unreachable!()
                };
                // Inheritance inside N \ {j}.
                assert!(inherited
                    .iter()
                    .all(|(j, s)| !s.contains(j) && s.is_subset(&nbrs)));
                if nbrs.len() >= 2 {
                    let union: BTreeSet<AgentId> = inherited.values().flatten().copied().collect();
                    assert_eq!(union, nbrs);
                }
                // Connectivity by flood fill over the patch edges.
                let mut reached = BTreeSet::from([*nbrs.iter().next().unwrap()]);
                loop {
                    let before = reached.len();
                    for ed in p.new_edges() {
                        if reached.contains(&ed.lo()) || reached.contains(&ed.hi()) {
                            reached.insert(ed.lo());
                            reached.insert(ed.hi());
                        }
                    }
                    if reached.len() == before {
                        break;
                    }
                }
                assert_eq!(reached, nbrs);
                assert!(is_locally_connected(&p.involved(), &p.new_edges()).unwrap());
                assert_eq!(
                    validate_patch(&p, Some(&nbrs), |_| true, 8).map(drop),
                    Ok(())
                );
            }
        }
    }

    #[test]
    fn partition_rule_examples() {
        // Agent 3 of a triangle duplicates into (4, 5) with pick = {1}.
        let p = dup_partition_with_pick(a(3), &set(&[1, 2]), [a(4), a(5)], &set(&[1]), HALF8);
        assert_eq!(edges(&p), vec![e(1, 4), e(2, 5), e(4, 5)]);
        let mut s = state(&[2, 3, 8], shapes::cycle(3), 8);
        s.mint_id();
        s.mint_id();
        apply_duplication(&mut s, p.clone()).unwrap();
        assert!(classify(&s.topology).unwrap().hole);
        assert_eq!(s.topology.node_count(), 4);

        // Chain extreme: pick is empty, the first child becomes the new extreme.
        let p = dup_partition_with_pick(a(1), &set(&[2]), [a(4), a(5)], &BTreeSet::new(), HALF8);
        let PatchDetail::Duplication {
            child_neighbors, ..
        } = &p.detail
        else {
            unreachable!()
        };
        assert_eq!(child_neighbors[0], set(&[5]));
        assert_eq!(child_neighbors[1], set(&[2, 4]));
        let mut s = state(&[8, 3, 2], shapes::path(3), 8);
        s.mint_id();
        s.mint_id();
        apply_duplication(&mut s, p.clone()).unwrap();
        assert!(classify(&s.topology).unwrap().chain);
        assert_eq!(s.topology.node_count(), 4);
    }

    #[test]
    fn partition_pick_size() {
        for seed in 0..20 {
            let mut r = rng::stream(seed, Purpose::Pick, 0);
            let p = dup_partition_rule(a(9), &set(&[1, 2, 3, 4]), [a(10), a(11)], HALF8, &mut r);
            let PatchDetail::Duplication {
                child_neighbors, ..
            } = &p.detail
            else {
                unreachable!()
            };
            assert_eq!(child_neighbors[0].len(), 3); // pick (2) + sibling
            assert_eq!(child_neighbors[1].len(), 3);
        }
    }

    #[test]
    fn full_rule_examples() {
        let mut s = state(&[2, 3, 8], shapes::complete(3), 8);
        let kids = [s.mint_id(), s.mint_id()];
        let p = dup_full_rule(a(3), &set(&[1, 2]), kids, HALF8);
        apply_duplication(&mut s, p.clone()).unwrap();
        assert!(classify(&s.topology).unwrap().complete);
        assert_eq!(s.topology.node_count(), 4);
        assert_eq!(s.sum(), 13);

        let p = dup_full_rule(a(2), &set(&[1]), [a(3), a(4)], HALF8);
        assert_eq!(edges(&p), vec![e(1, 3), e(1, 4), e(3, 4)]);
    }

    #[test]
    fn validate_rejects_orphaning_duplication() {
        let nbrs = set(&[1, 2]);
        let p = TopologyPatch {
            subject: a(3),
            neighbors: nbrs.clone(),
            detail: PatchDetail::Duplication {
                children: [a(4), a(5)],
                child_neighbors: [set(&[5]), set(&[4])],
                split: HALF8,
            },
        };
        let v = validate_patch(&p, Some(&nbrs), |_| true, 8).unwrap_err();
        assert_eq!(v.condition, Condition::DuplicationCoverage);
    }

    #[test]
    fn validate_accepts_shared_neighbor_alternative() {
        // Children not linked to each other but sharing neighbor 1.
        let nbrs = set(&[1, 2]);
        let p = TopologyPatch {
            subject: a(3),
            neighbors: nbrs.clone(),
            detail: PatchDetail::Duplication {
                children: [a(4), a(5)],
                child_neighbors: [set(&[1]), set(&[1, 2])],
                split: HALF8,
            },
        };
        assert_eq!(
            validate_patch(&p, Some(&nbrs), |_| true, 8).map(drop),
            Ok(())
        );
    }

    #[test]
    fn validate_rejects_bad_split() {
        let nbrs = set(&[1]);
        let p = dup_full_rule(a(2), &nbrs, [a(3), a(4)], Split { alpha: 4, beta: 3 });
        let v = validate_patch(&p, Some(&nbrs), |_| true, 8).unwrap_err();
        assert_eq!(v.condition, Condition::SplitSum);
        let p = dup_full_rule(a(2), &nbrs, [a(3), a(4)], Split { alpha: 3, beta: 5 });
        let v = validate_patch(&p, Some(&nbrs), |_| true, 8).unwrap_err();
        assert_eq!(v.condition, Condition::SplitOrder);
    }

    #[test]
    fn validate_rejects_disconnected_death_patch() {
        let nbrs = set(&[1, 2, 3, 4]);
        let inherited = BTreeMap::from([
            (a(1), set(&[2])),
            (a(2), set(&[1])),
            (a(3), set(&[4])),
            (a(4), set(&[3])),
        ]);
        let p = TopologyPatch {
            subject: a(5),
            neighbors: nbrs.clone(),
            detail: PatchDetail::Death { inherited },
        };
        let v = validate_patch(&p, Some(&nbrs), |_| true, 8).unwrap_err();
        assert_eq!(v.condition, Condition::LocalConnectivity);
    }

    #[test]
    fn validate_rejects_stale_neighborhood_and_reused_child() {
        let p = death_star_rule(a(5), &set(&[1, 2]), a(1)).unwrap();
        let v = validate_patch(&p, Some(&set(&[1])), |_| true, 8).unwrap_err();
        assert_eq!(v.condition, Condition::NeighborhoodMismatch);

        let p = dup_full_rule(a(2), &set(&[1]), [a(3), a(4)], HALF8);
        let v = validate_patch(&p, Some(&set(&[1])), |c| c != a(3), 8).unwrap_err();
        assert_eq!(v.condition, Condition::ChildNotFresh);
    }

    #[test]
    fn apply_death_examples() {
        // C4, agent 4 dies, star at 1: the triangle 1-2-3.
        let mut s = state(&[3, 2, 3, 0], shapes::cycle(4), 8);
        let p = death_star_rule(a(4), &set(&[1, 3]), a(1)).unwrap();
        let rec = apply_death(&mut s, p.clone()).unwrap();
        assert_eq!(
            s.topology.edges().collect::<Vec<_>>(),
            vec![e(1, 2), e(1, 3), e(2, 3)]
        );
        assert!(classify(&s.topology).unwrap().hole);
        assert_eq!((rec.epoch, s.epoch), (1, 1));

        // (0, 5, 5) on a triangle.
        let mut s = state(&[0, 5, 5], shapes::cycle(3), 8);
        let p = death_star_rule(a(1), &set(&[2, 3]), a(2)).unwrap();
        apply_death(&mut s, p.clone()).unwrap();
        assert_eq!(s.states.values().copied().collect::<Vec<_>>(), vec![5, 5]);
        assert_eq!(s.topology.edges().collect::<Vec<_>>(), vec![e(2, 3)]);
        assert_eq!(s.sum(), 10);

        // Chain extreme dies.
        let mut s = state(&[3, 4, 0], shapes::path(3), 8);
        let p = death_star_rule(a(3), &set(&[2]), a(2)).unwrap();
        let rec = apply_death(&mut s, p.clone()).unwrap();
        assert!(rec.new_edges.is_empty());
        assert_eq!(s.topology.edges().collect::<Vec<_>>(), vec![e(1, 2)]);
    }

    #[test]
    fn apply_requires_threshold_state() {
        let mut s = state(&[1, 5, 5], shapes::cycle(3), 8);
        let p = death_star_rule(a(1), &set(&[2, 3]), a(2)).unwrap();
        assert!(matches!(
            apply_death(&mut s, p.clone()),
            Err(EventError::WrongState { .. })
        ));
    }

    #[test]
    fn apply_duplication_example() {
        // (2, 8) on one edge, full rule, half split: (2, 4, 4) on a triangle.
        let mut s = state(&[2, 8], shapes::path(2), 8);
        let kids = [s.mint_id(), s.mint_id()];
        let p = dup_full_rule(
            a(2),
            &set(&[1]),
            kids,
            split_state(8, SplitPolicy::Half).unwrap(),
        );
        let rec = apply_duplication(&mut s, p.clone()).unwrap();
        assert_eq!(
            s.states.iter().map(|(k, v)| (k.0, *v)).collect::<Vec<_>>(),
            vec![(1, 2), (3, 4), (4, 4)]
        );
        assert!(classify(&s.topology).unwrap().complete);
        assert_eq!(rec.kind(), PatchKind::Duplication);
        assert_eq!(s.sum(), 10);
    }

    #[test]
    fn max_state_neighbor_tie_breaks_to_smallest_id() {
        let s = state(&[0, 5, 7, 7], shapes::complete(4), 8);
        assert_eq!(max_state_neighbor(&s, &set(&[2, 3, 4])), Some(a(3)));
        assert_eq!(max_state_neighbor(&s, &set(&[2])), Some(a(2)));
    }

    #[test]
    fn record_serializes() {
        let p = death_star_rule(a(5), &set(&[1, 2]), a(1)).unwrap();
        let rec = CriticalEventRecord {
            epoch: 3,
            tick: 10,
            new_edges: p.new_edges(),
            patch: p,
        };
        let text = serde_json::to_string(&rec).unwrap();
        let back: CriticalEventRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
    }

    fn arb_connected() -> impl Strategy<Value = Topology> {
        // Random tree plus extra edges over ids 1..=n.
        (3usize..9).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<prop::sample::Index>(), n - 1),
                proptest::collection::vec((0..n, 0..n), 0..n * 2),
            )
                .prop_map(move |(parents, extra)| {
                    let mut g = Topology::from_parts((1..=n as u64).map(a), []).unwrap();
                    for (k, idx) in parents.iter().enumerate() {
                        let child = k as u64 + 2;
                        let parent = idx.index(k + 1) as u64 + 1;
                        g.add_edge(e(child, parent)).unwrap();
                    }
                    for (u, v) in extra {
                        if u != v {
                            g.add_edge(e(u as u64 + 1, v as u64 + 1)).unwrap();
                        }
                    }
                    g
                })
        })
    }

    proptest! {
        /// Validated patches on connected graphs keep the graph connected,
        /// and rules (12)+(13) move the edge count by +1 / at most -1.
        #[test]
        fn catalog_patches_preserve_connectivity(g in arb_connected(), pick in any::<prop::sample::Index>(), seed: u64) {
            let nodes: Vec<AgentId> = g.nodes().collect();
            let subject = nodes[pick.index(nodes.len())];
            let n = nodes.len() as u64;

            for rule in [DeathRuleKind::Star(JStarPolicy::MaxState), DeathRuleKind::Star(JStarPolicy::Random), DeathRuleKind::Clique] {
                let xs: BTreeMap<AgentId, u64> = nodes.iter().map(|&id| (id, if id == subject { 0 } else { 1 + id.0 % 5 })).collect();
                let mut s = SystemState::new(xs, g.clone(), 8).unwrap();
                let before = s.topology.edge_count();
                let p = rule.patch(&EventContext { state: &s, subject, seed }).unwrap();
                apply_death(&mut s, p.clone()).unwrap();
                prop_assert!(is_connected(&s.topology));
                prop_assert!(s.topology.check_symmetry());
                prop_assert_eq!(s.topology.node_count() as u64, n - 1);
                if matches!(rule, DeathRuleKind::Star(_)) {
                    prop_assert!(s.topology.edge_count() < before);
                }
            }
            for rule in [DuplicationRuleKind::Partition, DuplicationRuleKind::Full] {
                let xs: BTreeMap<AgentId, u64> = nodes.iter().map(|&id| (id, if id == subject { 8 } else { 1 + id.0 % 5 })).collect();
                let mut s = SystemState::new(xs, g.clone(), 8).unwrap();
                let before = s.topology.edge_count();
                let sum = s.sum();
                let kids = [s.mint_id(), s.mint_id()];
                let p = rule.patch(&EventContext { state: &s, subject, seed }, kids, HALF8).unwrap();
                apply_duplication(&mut s, p.clone()).unwrap();
                prop_assert!(is_connected(&s.topology));
                prop_assert!(s.topology.check_symmetry());
                prop_assert_eq!(s.sum(), sum);
                prop_assert_eq!(s.topology.node_count() as u64, n + 1);
                if rule == DuplicationRuleKind::Partition {
                    prop_assert_eq!(s.topology.edge_count(), before + 1);
                    prop_assert!(s.topology.cycle_count() == g.cycle_count());
                }
            }
        }
    }
}

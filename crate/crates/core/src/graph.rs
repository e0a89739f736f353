//! Dynamic undirected simple graph over stable agent identifiers.
//!
//! Nodes and adjacency sets are kept in ordered maps so that every iteration
//! (edge lists, neighbor sets, serialization) is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Opaque agent identifier. Never reused within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u64);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Undirected edge stored with the smaller endpoint first.
///
/// The derived ordering is the canonical edge order: lexicographic by
/// `(min id, max id)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "(u64, u64)", try_from = "(u64, u64)")]
pub struct Edge {
    lo: AgentId,
    hi: AgentId,
}

impl Edge {
    /// Builds a normalized edge. Fails on a self-loop.
    pub fn new(a: AgentId, b: AgentId) -> Result<Self, GraphError> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Edge { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Ok(Edge { lo: b, hi: a }),
            std::cmp::Ordering::Equal => Err(GraphError::SelfLoop(a)),
        }
    }

    pub fn lo(&self) -> AgentId {
        self.lo
    }

    pub fn hi(&self) -> AgentId {
        self.hi
    }

    pub fn endpoints(&self) -> (AgentId, AgentId) {
        (self.lo, self.hi)
    }

    pub fn contains(&self, a: AgentId) -> bool {
        self.lo == a || self.hi == a
    }
}

impl From<Edge> for (u64, u64) {
    fn from(e: Edge) -> Self {
        (e.lo.0, e.hi.0)
    }
}

impl TryFrom<(u64, u64)> for Edge {
    type Error = GraphError;

    fn try_from((a, b): (u64, u64)) -> Result<Self, Self::Error> {
        Edge::new(AgentId(a), AgentId(b))
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lo, self.hi)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("self-loop on agent {0}")]
    SelfLoop(AgentId),
    #[error("agent {0} is not in the graph")]
    UnknownNode(AgentId),
    #[error("agent {0} is already in the graph")]
    DuplicateNode(AgentId),
    #[error("invalid patch: edge {edge} has an endpoint outside the involved set")]
    InvalidPatch { edge: Edge },
    #[error("degenerate input: empty graph")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Shape flags of a topology. Flags are not mutually exclusive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopologyShape {
    pub complete: bool,
    pub hole: bool,
    pub chain: bool,
}

impl fmt::Display for TopologyShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.complete {
            names.push("complete");
        }
        if self.hole {
            names.push("hole");
        }
        if self.chain {
            names.push("chain");
        }
        if names.is_empty() {
            f.write_str("generic")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

/// A single shape flag, used when asserting that one shape is invariant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFlag {
    Complete,
    Hole,
    Chain,
}

impl ShapeFlag {
    pub fn holds(self, shape: TopologyShape) -> bool {
        match self {
            ShapeFlag::Complete => shape.complete,
            ShapeFlag::Hole => shape.hole,
            ShapeFlag::Chain => shape.chain,
        }
    }

    /// Fewest agents on which the shape can exist at all.
    pub fn min_nodes(self) -> usize {
        match self {
            ShapeFlag::Complete => 1,
            ShapeFlag::Chain => 2,
            ShapeFlag::Hole => 3,
        }
    }
}

impl fmt::Display for ShapeFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFlag::Complete => "complete",
            ShapeFlag::Hole => "hole",
            ShapeFlag::Chain => "chain",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Topology {
    adj: BTreeMap<AgentId, BTreeSet<AgentId>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a topology from a node list and an edge list.
    pub fn from_parts<N, E>(nodes: N, edges: E) -> Result<Self, GraphError>
    where
        N: IntoIterator<Item = AgentId>,
        E: IntoIterator<Item = Edge>,
    {
        let mut g = Topology::new();
        for n in nodes {
            g.add_node(n)?;
        }
        for e in edges {
            g.add_edge(e)?;
        }
        Ok(g)
    }

    pub fn add_node(&mut self, id: AgentId) -> Result<(), GraphError> {
        if self.adj.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        self.adj.insert(id, BTreeSet::new());
        Ok(())
    }

    /// Removes a node and all incident edges, returning its former neighbors.
    pub fn remove_node(&mut self, id: AgentId) -> Result<BTreeSet<AgentId>, GraphError> {
        let nbrs = self.adj.remove(&id).ok_or(GraphError::UnknownNode(id))?;
        for n in &nbrs {
            if let Some(set) = self.adj.get_mut(n) {
                set.remove(&id);
            }
        }
        Ok(nbrs)
    }

    /// Inserts an edge; returns `false` if it was already present.
    pub fn add_edge(&mut self, e: Edge) -> Result<bool, GraphError> {
        let (a, b) = e.endpoints();
        if !self.adj.contains_key(&b) {
            return Err(GraphError::UnknownNode(b));
        }
        let fresh = self
            .adj
            .get_mut(&a)
            .ok_or(GraphError::UnknownNode(a))?
            .insert(b);
        if fresh {
            self.adj.get_mut(&b).expect("checked").insert(a);
        }
        Ok(fresh)
    }

    pub fn remove_edge(&mut self, e: Edge) -> bool {
        let (a, b) = e.endpoints();
        let removed = self.adj.get_mut(&a).is_some_and(|s| s.remove(&b));
        if let Some(s) = self.adj.get_mut(&b) {
            s.remove(&a);
        }
        removed
    }

    pub fn contains_node(&self, id: AgentId) -> bool {
        self.adj.contains_key(&id)
    }

    pub fn has_edge(&self, e: Edge) -> bool {
        self.adj.get(&e.lo()).is_some_and(|s| s.contains(&e.hi()))
    }

    pub fn neighbors(&self, id: AgentId) -> Option<&BTreeSet<AgentId>> {
        self.adj.get(&id)
    }

    pub fn degree(&self, id: AgentId) -> Option<usize> {
        self.adj.get(&id).map(BTreeSet::len)
    }

    pub fn nodes(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.adj.keys().copied()
    }

    /// Edges in canonical order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.adj.iter().flat_map(|(&a, nbrs)| {
            nbrs.range(a..)
                .filter(move |&&b| b != a)
                .map(move |&b| Edge { lo: a, hi: b })
        })
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn component_count(&self) -> usize {
        let ids: Vec<AgentId> = self.adj.keys().copied().collect();
        let mut uf = UnionFind::new(ids.len());
        for (i, nbrs) in self.adj.values().enumerate() {
            if uf.count <= 1 {
                break;
            }
            for b in nbrs.range(ids[i]..) {
                if let Ok(j) = ids.binary_search(b) {
                    uf.union(i, j);
                }
            }
        }
        uf.count
    }

    /// Cyclomatic number `|E| - |V| + c`; for connected graphs `|E| - |V| + 1`.
    pub fn cycle_count(&self) -> usize {
        (self.edge_count() + self.component_count()) - self.node_count()
    }

    /// Symmetry after a local rewrite: `removed` is gone from the graph and
    /// from its former neighbors, and every edge in `added` is stored in both
    /// directions.
    pub fn check_symmetry_local(
        &self,
        removed: AgentId,
        former: &BTreeSet<AgentId>,
        added: &[Edge],
    ) -> bool {
        let has = |x: AgentId, y: AgentId| self.adj.get(&x).is_some_and(|s| s.contains(&y));
        !self.adj.contains_key(&removed)
            && former
                .iter()
                .all(|v| self.adj.get(v).is_none_or(|s| !s.contains(&removed)))
            && added
                .iter()
                .all(|e| e.lo() != e.hi() && has(e.lo(), e.hi()) && has(e.hi(), e.lo()))
    }

    /// Checks the adjacency symmetry and no-self-loop invariants.
    pub fn check_symmetry(&self) -> bool {
        self.adj.iter().all(|(a, nbrs)| {
            !nbrs.contains(a)
                && nbrs
                    .iter()
                    .all(|b| self.adj.get(b).is_some_and(|s| s.contains(a)))
        })
    }

    /// Edge-list serialization: a `nodes` header followed by one `u v` line per
    /// edge with `u < v`.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::from("nodes");
        for n in self.nodes() {
            out.push(' ');
            out.push_str(&n.to_string());
        }
        out.push('\n');
        for e in self.edges() {
            out.push_str(&format!("{} {}\n", e.lo(), e.hi()));
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "missing nodes header".into(),
        })?;
        let mut words = header.split_whitespace();
        if words.next() != Some("nodes") {
            return Err(GraphError::Parse {
                line: hline,
                msg: "expected `nodes` header".into(),
            });
        }
        let mut g = Topology::new();
        for w in words {
            let id = parse_id(w, hline)?;
            g.add_node(id).map_err(|e| GraphError::Parse {
                line: hline,
                msg: e.to_string(),
            })?;
        }
        for (line, l) in lines {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(GraphError::Parse {
                    line,
                    msg: format!("expected `u v`, got `{l}`"),
                });
            }
            let (u, v) = (parse_id(parts[0], line)?, parse_id(parts[1], line)?);
            if u >= v {
                return Err(GraphError::Parse {
                    line,
                    msg: "edge endpoints must satisfy u < v".into(),
                });
            }
            let fresh =
                Edge::new(u, v)
                    .and_then(|e| g.add_edge(e))
                    .map_err(|e| GraphError::Parse {
                        line,
                        msg: e.to_string(),
                    })?;
            if !fresh {
                return Err(GraphError::Parse {
                    line,
                    msg: format!("duplicate edge {u} {v}"),
                });
            }
        }
        Ok(g)
    }
}

fn parse_id(w: &str, line: usize) -> Result<AgentId, GraphError> {
    w.parse::<u64>()
        .map(AgentId)
        .map_err(|_| GraphError::Parse {
            line,
            msg: format!("bad agent id `{w}`"),
        })
}

/// True iff every pair of nodes is joined by a path. Empty and single-node
/// graphs are connected.
/// Union-find over `ids` (sorted, distinct); pairs with an endpoint outside
/// `ids` are ignored.
struct UnionFind {
    parent: Vec<usize>,
    count: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            count: n,
        }
    }

    fn root(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.root(i), self.root(j));
        if ri != rj {
            self.parent[ri.max(rj)] = ri.min(rj);
            self.count -= 1;
        }
    }
}

pub fn is_connected(g: &Topology) -> bool {
    g.component_count() <= 1
}

/// Connectivity of the patch subgraph `(lam, eps)`.
pub fn is_locally_connected(lam: &BTreeSet<AgentId>, eps: &[Edge]) -> Result<bool, GraphError> {
    let ids: Vec<AgentId> = lam.iter().copied().collect();
    let mut uf = UnionFind::new(ids.len());
    for e in eps {
        let (Ok(i), Ok(j)) = (ids.binary_search(&e.lo()), ids.binary_search(&e.hi())) else {
            return Err(GraphError::InvalidPatch { edge: *e });
        };
        uf.union(i, j);
    }
    Ok(uf.count <= 1)
}

pub fn classify(g: &Topology) -> Result<TopologyShape, GraphError> {
    if g.node_count() == 0 {
        return Err(GraphError::Empty);
    }
    Ok(summarize(g).shape)
}

/// Size, component count and shape from a single pass over the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub components: usize,
    pub shape: TopologyShape,
}

impl GraphSummary {
    pub fn connected(&self) -> bool {
        self.components <= 1
    }

    pub fn cycles(&self) -> usize {
        self.edges + self.components - self.nodes
    }
}

pub fn summarize(g: &Topology) -> GraphSummary {
    let n = g.node_count();
    let m = g.edge_count();
    let components = g.component_count();
    let connected = components <= 1;
    let (mut ones, mut twos) = (0, 0);
    for nbrs in g.adj.values() {
        match nbrs.len() {
            1 => ones += 1,
            2 => twos += 1,
            _ => {}
        }
    }
    GraphSummary {
        nodes: n,
        edges: m,
        components,
        shape: TopologyShape {
            complete: n > 0 && m == n * (n - 1) / 2,
            hole: connected && n >= 3 && twos == n,
            chain: connected && n >= 2 && ones == 2 && ones + twos == n,
        },
    }
}

/// Stable hash key of a labeled configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigKey(pub u64);

/// Canonical byte serialization of a labeled configuration: node ids with
/// states in id order, then edges in canonical order.
pub fn canonical_bytes(g: &Topology, states: &BTreeMap<AgentId, u64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * (states.len() + g.edge_count()) + 16);
    out.extend_from_slice(&(states.len() as u64).to_le_bytes());
    for (id, x) in states {
        out.extend_from_slice(&id.0.to_le_bytes());
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(g.edge_count() as u64).to_le_bytes());
    for e in g.edges() {
        out.extend_from_slice(&e.lo().0.to_le_bytes());
        out.extend_from_slice(&e.hi().0.to_le_bytes());
    }
    out
}

pub fn canonical_key(g: &Topology, states: &BTreeMap<AgentId, u64>) -> ConfigKey {
    debug_assert!(g.nodes().eq(states.keys().copied()));
    let digest = Sha256::digest(canonical_bytes(g, states));
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    ConfigKey(u64::from_le_bytes(first))
}

/// Relabels agents by rank (smallest id becomes 0). Ids are minted in
/// increasing order, so relative order is preserved under relabeling.
pub fn rank_normalize(
    g: &Topology,
    states: &BTreeMap<AgentId, u64>,
) -> (Topology, BTreeMap<AgentId, u64>) {
    let rank: BTreeMap<AgentId, AgentId> = g
        .nodes()
        .enumerate()
        .map(|(i, id)| (id, AgentId(i as u64)))
        .collect();
    let nodes = rank.values().copied();
    let edges = g
        .edges()
        .map(|e| Edge::new(rank[&e.lo()], rank[&e.hi()]).expect("distinct ranks"));
    let topo = Topology::from_parts(nodes, edges).expect("relabeling is a bijection");
    let x = states.iter().map(|(id, &v)| (rank[id], v)).collect();
    (topo, x)
}

/// Test and scenario helpers building standard shapes over ids `1..=n`.
pub mod shapes {
    use super::*;

    fn ids(n: u64) -> impl Iterator<Item = AgentId> {
        (1..=n).map(AgentId)
    }

    fn e(a: u64, b: u64) -> Edge {
        Edge::new(AgentId(a), AgentId(b)).expect("distinct")
    }

    pub fn path(n: u64) -> Topology {
        Topology::from_parts(ids(n), (1..n).map(|i| e(i, i + 1))).expect("valid path")
    }

    pub fn cycle(n: u64) -> Topology {
        assert!(n >= 3, "a cycle needs at least three nodes");
        let mut g = path(n);
        g.add_edge(e(1, n)).expect("valid");
        g
    }

    pub fn complete(n: u64) -> Topology {
        let edges = (1..=n).flat_map(|i| (i + 1..=n).map(move |j| e(i, j)));
        Topology::from_parts(ids(n), edges).expect("valid clique")
    }
}

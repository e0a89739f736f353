//! Start configurations: standard shapes and seeded random graphs/states.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{shapes, AgentId, Edge, Topology};
use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("cannot place chi = {chi} on {n} agents with states in [1, {max}]")]
    StatesInfeasible { chi: u64, n: u64, max: u64 },
    #[error("a connected graph on {n} nodes needs between {min} and {max} edges, got {m}")]
    EdgesInfeasible { n: u64, m: u64, min: u64, max: u64 },
    #[error("shape {shape} needs at least {min} nodes, got {n}")]
    TooFewNodes { shape: StartShape, n: u64, min: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartShape {
    Hole,
    Chain,
    Complete,
    /// Random connected graph with the given edge count.
    Random {
        edges: u64,
    },
}

impl fmt::Display for StartShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StartShape::Hole => f.write_str("hole"),
            StartShape::Chain => f.write_str("chain"),
            StartShape::Complete => f.write_str("complete"),
            StartShape::Random { edges } => write!(f, "random({edges})"),
        }
    }
}

/// Builds a start topology over ids `1..=n`.
pub fn build_topology(shape: StartShape, n: u64, seed: u64) -> Result<Topology, ScenarioError> {
    let min = match shape {
        StartShape::Hole => 3,
        StartShape::Chain => 2,
        StartShape::Complete | StartShape::Random { .. } => 1,
    };
    if n < min {
        return Err(ScenarioError::TooFewNodes { shape, n, min });
    }
    Ok(match shape {
        StartShape::Hole => shapes::cycle(n),
        StartShape::Chain => shapes::path(n),
        StartShape::Complete => shapes::complete(n),
        StartShape::Random { edges } => {
            random_connected(n, edges, &mut rng::stream(seed, Purpose::Scenario, 0))?
        }
    })
}

/// Uniform random spanning tree by random attachment, topped up with
/// uniformly drawn extra edges.
pub fn random_connected<R: Rng + ?Sized>(
    n: u64,
    m: u64,
    rng: &mut R,
) -> Result<Topology, ScenarioError> {
    let max = n * n.saturating_sub(1) / 2;
    let min = n.saturating_sub(1);
    if m < min || m > max {
        return Err(ScenarioError::EdgesInfeasible { n, m, min, max });
    }
    let mut order: Vec<u64> = (1..=n).collect();
    order.shuffle(rng);
    let mut g = Topology::from_parts((1..=n).map(AgentId), []).expect("fresh ids");
    let edge = |a: u64, b: u64| Edge::new(AgentId(a), AgentId(b)).expect("distinct");
    for k in 1..order.len() {
        let parent = order[rng.random_range(0..k)];
        g.add_edge(edge(order[k], parent)).expect("known nodes");
    }
    let mut missing: Vec<Edge> = (1..=n)
        .flat_map(|i| (i + 1..=n).map(move |j| (i, j)))
        .map(|(i, j)| edge(i, j))
        .filter(|e| !g.has_edge(*e))
        .collect();
    missing.shuffle(rng);
    for e in missing.into_iter().take((m - min) as usize) {
        g.add_edge(e).expect("known nodes");
    }
    Ok(g)
}

/// `n` states in `[1, B - 1]` summing to `chi`, spread by single-unit random
/// increments.
pub fn random_states<R: Rng + ?Sized>(
    n: u64,
    chi: u64,
    upper: u64,
    rng: &mut R,
) -> Result<Vec<u64>, ScenarioError> {
    let max = upper.saturating_sub(1);
    if max == 0 || chi < n || chi > n * max {
        return Err(ScenarioError::StatesInfeasible { chi, n, max });
    }
    let mut xs = vec![1u64; n as usize];
    let mut open: Vec<usize> = (0..n as usize).filter(|&i| xs[i] < max).collect();
    for _ in 0..chi - n {
        let k = rng.random_range(0..open.len());
        let i = open[k];
        xs[i] += 1;
        if xs[i] == max {
            open.swap_remove(k);
        }
    }
    Ok(xs)
}

/// Random states keyed by ids `1..=n`.
pub fn random_state_map(
    n: u64,
    chi: u64,
    upper: u64,
    seed: u64,
) -> Result<BTreeMap<AgentId, u64>, ScenarioError> {
    let mut r = rng::stream(seed, Purpose::Scenario, 1);
    let xs = random_states(n, chi, upper, &mut r)?;
    Ok(xs
        .into_iter()
        .enumerate()
        .map(|(i, x)| (AgentId(i as u64 + 1), x))
        .collect())
}

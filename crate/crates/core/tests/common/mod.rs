#![allow(dead_code)]

use dissensus::events::{RuleSet, CATALOG};
use dissensus::protocol::{DeltaKind, SchedulerKind};
use dissensus::scenario::{build_topology, random_state_map, StartShape};
use dissensus::RunConfig;

pub const DELTAS: [DeltaKind; 3] = [DeltaKind::Unit, DeltaKind::Max, DeltaKind::Uniform];

/// Random connected start on `n` agents with states in `[1, B - 1]`.
#[allow(clippy::too_many_arguments)]
pub fn random_config(
    n: u64,
    extra: u64,
    chi: u64,
    upper: u64,
    rules: RuleSet,
    delta: DeltaKind,
    random_scheduler: bool,
    seed: u64,
) -> Option<RunConfig> {
    let m = (n - 1 + extra).min(n * (n - 1) / 2);
    let g = build_topology(StartShape::Random { edges: m }, n, seed).ok()?;
    let states = random_state_map(n, chi, upper, seed).ok()?;
    let mut c = RunConfig::new(upper, states, g.edges().collect());
    c.death = rules.death;
    c.duplication = rules.duplication;
    c.delta = delta;
    c.scheduler = if random_scheduler {
        SchedulerKind::Random
    } else {
        SchedulerKind::RoundRobin
    };
    c.seed = seed;
    Some(c)
}

pub fn rules(k: usize) -> RuleSet {
    CATALOG[k % CATALOG.len()]
}
